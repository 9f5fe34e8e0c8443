// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder over residual-stream activations: forward pass,
//! dictionary learning, hazard-feature selection and feature clamping.

mod checkpoint;
mod select;
mod train;

pub use checkpoint::SaeCheckpoint;
pub use select::{build_clamp_plan, case_feature_means, random_clamp_plan, select_features, FeatureRow, FeatureTable};
pub use train::{train_sae, SaeTrainConfig, SaeTrainReport};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};

/// Default L1 sparsity coefficient.
pub const DEFAULT_L1: f32 = 5e-3;
/// Tolerance on decoder atom norms.
pub const UNIT_NORM_TOL: f32 = 1e-6;

/// `f = ReLU(h W_enc + b_enc)`, `ĥ = f W_dec + b_dec`. Rows of `w_dec` are
/// the dictionary atoms and have unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    /// `d_model × width`.
    pub w_enc: Array2<f32>,
    pub b_enc: Array1<f32>,
    /// `width × d_model`.
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
    pub l1_coeff: f32,
}

impl SaeModel {
    pub fn new(
        w_enc: Array2<f32>,
        b_enc: Array1<f32>,
        w_dec: Array2<f32>,
        b_dec: Array1<f32>,
        l1_coeff: f32,
    ) -> Result<Self> {
        let (d, width) = w_enc.dim();
        if b_enc.len() != width || w_dec.dim() != (width, d) || b_dec.len() != d {
            return Err(SteerError::Input(format!(
                "inconsistent SAE shapes: w_enc {:?}, b_enc {}, w_dec {:?}, b_dec {}",
                w_enc.shape(),
                b_enc.len(),
                w_dec.shape(),
                b_dec.len()
            )));
        }
        let sae = Self {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            l1_coeff,
        };
        if !sae.all_finite() {
            return Err(SteerError::Input("SAE has non-finite weights".into()));
        }
        let worst = sae.max_atom_norm_error();
        if worst > UNIT_NORM_TOL {
            return Err(SteerError::Input(format!(
                "decoder atoms deviate from unit norm by {worst}"
            )));
        }
        Ok(sae)
    }

    /// An SAE with `W_enc = [I, −I]`, `W_dec = [I; −I]` and zero biases,
    /// which reconstructs every input exactly.
    pub fn perfect(d_model: usize) -> Self {
        let mut w_enc = Array2::zeros((d_model, 2 * d_model));
        let mut w_dec = Array2::zeros((2 * d_model, d_model));
        for i in 0..d_model {
            w_enc[(i, i)] = 1.0;
            w_enc[(i, d_model + i)] = -1.0;
            w_dec[(i, i)] = 1.0;
            w_dec[(d_model + i, i)] = -1.0;
        }
        Self {
            w_enc,
            b_enc: Array1::zeros(2 * d_model),
            w_dec,
            b_dec: Array1::zeros(d_model),
            l1_coeff: 0.0,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn width(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn all_finite(&self) -> bool {
        self.w_enc
            .iter()
            .chain(self.b_enc.iter())
            .chain(self.w_dec.iter())
            .chain(self.b_dec.iter())
            .all(|v| v.is_finite())
    }

    /// Largest `|‖atom‖ − 1|` over decoder rows.
    pub fn max_atom_norm_error(&self) -> f32 {
        self.w_dec
            .rows()
            .into_iter()
            .map(|r| {
                let n = r.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
                (n - 1.0).abs() as f32
            })
            .fold(0.0, f32::max)
    }

    /// Rescales every decoder row to unit norm (zero rows are left alone).
    pub fn renormalize_decoder(&mut self) {
        for mut row in self.w_dec.rows_mut() {
            let n = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if n > 0.0 {
                row.mapv_inplace(|x| (f64::from(x) / n) as f32);
            }
        }
    }

    fn check_len(&self, h: &[f32]) -> Result<()> {
        if h.len() != self.d_model() {
            return Err(SteerError::Input(format!(
                "hidden state has length {}, SAE expects {}",
                h.len(),
                self.d_model()
            )));
        }
        Ok(())
    }

    /// Feature activations for one hidden state.
    pub fn encode(&self, h: &[f32]) -> Result<Vec<f32>> {
        self.check_len(h)?;
        let mut f = self.b_enc.to_vec();
        for (row, &x) in self.w_enc.rows().into_iter().zip(h) {
            for (fj, &w) in f.iter_mut().zip(row.iter()) {
                *fj += x * w;
            }
        }
        f.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(f)
    }

    /// Reconstruction from feature activations.
    pub fn decode(&self, f: &[f32]) -> Result<Vec<f32>> {
        if f.len() != self.width() {
            return Err(SteerError::Input(format!(
                "{} features for an SAE of width {}",
                f.len(),
                self.width()
            )));
        }
        let mut h = vec![0.0f32; self.d_model()];
        for (row, &fk) in self.w_dec.rows().into_iter().zip(f) {
            if fk != 0.0 {
                for (hj, &w) in h.iter_mut().zip(row.iter()) {
                    *hj += fk * w;
                }
            }
        }
        for (hj, &b) in h.iter_mut().zip(self.b_dec.iter()) {
            *hj += b;
        }
        Ok(h)
    }

    /// Encode, clamp, decode: the residual state written back by the
    /// substitution hook.
    pub fn substitute(&self, h: &[f32], plan: &ClampPlan) -> Result<Vec<f32>> {
        let f = clamp_features(&self.encode(h)?, plan)?;
        self.decode(&f)
    }
}

/// Feature activations and reconstruction for one hidden state.
pub fn sae_forward(h: &[f32], sae: &SaeModel) -> Result<(Vec<f32>, Vec<f32>)> {
    let f = sae.encode(h)?;
    let h_hat = sae.decode(&f)?;
    Ok((f, h_hat))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    HazardTopK,
    RandomControl,
}

/// Feature id → clamped value (`multiplier ×` the feature's TP mean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampPlan {
    targets: BTreeMap<usize, f32>,
    pub multiplier: f32,
    pub mode: ClampMode,
}

impl ClampPlan {
    pub fn new(targets: BTreeMap<usize, f32>, multiplier: f32, mode: ClampMode) -> Result<Self> {
        if let Some((id, v)) = targets.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(SteerError::Input(format!(
                "clamp target for feature {id} is {v}, must be finite and ≥ 0"
            )));
        }
        Ok(Self {
            targets,
            multiplier,
            mode,
        })
    }

    pub fn empty() -> Self {
        Self {
            targets: BTreeMap::new(),
            multiplier: 1.0,
            mode: ClampMode::HazardTopK,
        }
    }

    pub fn targets(&self) -> &BTreeMap<usize, f32> {
        &self.targets
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Sets the planned features to their targets, leaving the rest untouched.
pub fn clamp_features(f: &[f32], plan: &ClampPlan) -> Result<Vec<f32>> {
    let mut out = f.to_vec();
    for (&id, &v) in &plan.targets {
        let slot = out
            .get_mut(id)
            .ok_or_else(|| SteerError::Input(format!("clamp feature {id} out of range (width {})", f.len())))?;
        *slot = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
