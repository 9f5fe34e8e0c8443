// SPDX-License-Identifier: MIT OR Apache-2.0

//! L2-regularized logistic regression by damped Newton iterations.
//!
//! The objective is `Σᵢ [log(1 + e^{zᵢ}) − yᵢ zᵢ] + ‖w‖² / (2C)` with
//! `zᵢ = wᵀxᵢ + b`. The intercept is not penalized.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Result, SteerError};

/// Default stopping tolerance on the estimated objective gap.
pub const DEFAULT_TOL: f64 = 1e-6;
const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 60;

/// A fitted linear classifier `σ(wᵀx + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
    pub iterations: usize,
}

impl LogisticFit {
    /// Decision score `wᵀx + b` for every row.
    pub fn scores(&self, x: &ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| row.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>() + self.bias)
            .collect()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn objective(x: &Array2<f64>, y: &[f64], theta: &DVector<f64>, inv_c: f64) -> (f64, Array1<f64>) {
    let d = x.ncols() - 1;
    let t = Array1::from_iter(theta.iter().copied());
    let z = x.dot(&t);
    let loss: f64 = z.iter().zip(y).map(|(&zi, &yi)| softplus(zi) - yi * zi).sum();
    let penalty: f64 = theta.rows(0, d).iter().map(|w| w * w).sum::<f64>() * inv_c / 2.0;
    (loss + penalty, z)
}

/// Fits the regularized objective above. `x` holds one case per row.
pub fn fit_logistic(x: &ArrayView2<'_, f64>, labels: &[bool], c: f64, tol: f64) -> Result<LogisticFit> {
    let (n, d) = x.dim();
    if labels.len() != n {
        return Err(SteerError::Input(format!("{n} rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(SteerError::InsufficientData("logistic fit on zero cases".into()));
    }
    if !(c > 0.0 && c.is_finite()) || !(tol > 0.0) {
        return Err(SteerError::Config(format!(
            "invalid regularization C = {c} or tolerance {tol}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SteerError::Input("non-finite feature value".into()));
    }
    let inv_c = 1.0 / c;
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let mut xa = Array2::<f64>::ones((n, d + 1));
    xa.slice_mut(ndarray::s![.., ..d]).assign(x);
    let mut theta = DVector::<f64>::zeros(d + 1);
    let (mut obj, mut z) = objective(&xa, &y, &theta, inv_c);
    let mut last_change = f64::INFINITY;
    for iter in 0..MAX_ITER {
        let p: Array1<f64> = z.mapv(sigmoid);
        let resid = &p - &Array1::from(y.clone());
        let mut grad_nd = xa.t().dot(&resid);
        for j in 0..d {
            grad_nd[j] += theta[j] * inv_c;
        }
        let s = p.mapv(|v| (v * (1.0 - v)).sqrt());
        let xs = &xa * &s.view().insert_axis(Axis(1));
        let mut hess_nd = xs.t().dot(&xs);
        for j in 0..d {
            hess_nd[(j, j)] += inv_c;
        }
        let grad = DVector::from_iterator(d + 1, grad_nd.iter().copied());
        let grad_norm = grad.norm();
        let hess = DMatrix::from_row_slice(
            d + 1,
            d + 1,
            hess_nd.as_standard_layout().as_slice().expect("contiguous"),
        );
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                return Err(SteerError::NonConvergence {
                    iterations: iter,
                    grad_norm,
                    objective_change: last_change,
                });
            }
        };
        let decrement = grad.dot(&step);
        if decrement / 2.0 <= tol {
            return Ok(LogisticFit {
                weights: theta.rows(0, d).iter().copied().collect(),
                bias: theta[d],
                objective: obj,
                iterations: iter,
            });
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &theta - &step * t;
            let (cand_obj, cand_z) = objective(&xa, &y, &cand, inv_c);
            if cand_obj.is_finite() && cand_obj <= obj - 0.25 * t * decrement {
                last_change = obj - cand_obj;
                theta = cand;
                obj = cand_obj;
                z = cand_z;
                accepted = true;
                break;
            }
            t /= 2.0;
        }
        if !accepted {
            return Err(SteerError::NonConvergence {
                iterations: iter + 1,
                grad_norm,
                objective_change: 0.0,
            });
        }
    }
    let p: Array1<f64> = z.mapv(sigmoid);
    let mut g = xa.t().dot(&(&p - &Array1::from(y)));
    for j in 0..d {
        g[j] += theta[j] * inv_c;
    }
    Err(SteerError::NonConvergence {
        iterations: MAX_ITER,
        grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
        objective_change: last_change,
    })
}
