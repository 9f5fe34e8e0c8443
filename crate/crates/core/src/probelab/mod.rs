// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes, mean-difference directions and the critical layer.

mod logistic;
mod probe;

use ndarray::ArrayView2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::Assignment;
use crate::error::{Result, SteerError};
use crate::rng;
use crate::stats::cohens_d;

pub use logistic::{fit_logistic, LogisticFit, DEFAULT_TOL};
pub use probe::{
    probe_sweep, probe_sweep_tensors, stratified_folds, train_probe, train_probe_matrix, GridPoint, ProbeConfig,
    ProbeResult, ProbeSweep,
};

/// Tolerance on the norm of a stored direction.
pub const DIRECTION_NORM_TOL: f64 = 1e-6;

/// How a steering direction was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Tsv,
    Correction,
    Random { seed: u64 },
}

/// A unit vector in the residual stream of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub layer: usize,
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

impl Direction {
    pub fn d_model(&self) -> usize {
        self.vector.len()
    }

    /// The vector in the model's precision, for use in hooks.
    pub fn to_f32(&self) -> Vec<f32> {
        self.vector.iter().map(|&v| v as f32).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let norm = l2(&self.vector);
        if (norm - 1.0).abs() > DIRECTION_NORM_TOL {
            return Err(SteerError::DegenerateDirection(format!(
                "direction norm {norm} is not 1"
            )));
        }
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let norm = l2(&v);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(SteerError::DegenerateDirection(format!("{what} has norm {norm}")));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// `(mean_a − mean_b) / ‖mean_a − mean_b‖`.
pub fn make_direction(layer: usize, mean_a: &[f64], mean_b: &[f64], provenance: Provenance) -> Result<Direction> {
    if mean_a.len() != mean_b.len() || mean_a.is_empty() {
        return Err(SteerError::Input(format!(
            "mean vectors of lengths {} and {}",
            mean_a.len(),
            mean_b.len()
        )));
    }
    let diff: Vec<f64> = mean_a.iter().zip(mean_b).map(|(a, b)| a - b).collect();
    Ok(Direction {
        layer,
        vector: normalized(diff, "mean difference")?,
        provenance,
    })
}

/// Column means over `rows`, summing each column in sorted order so the
/// result does not depend on the order of the rows.
pub fn order_free_mean(x: &ArrayView2<'_, f32>, rows: &[usize]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(SteerError::InsufficientData("mean over zero rows".into()));
    }
    let mut col = Vec::with_capacity(rows.len());
    Ok((0..x.ncols())
        .map(|j| {
            col.clear();
            col.extend(rows.iter().map(|&i| f64::from(x[(i, j)])));
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / rows.len() as f64
        })
        .collect())
}

/// Mean TP state minus mean FN state at `layer`, normalized. `x` holds one
/// pooled row per case, aligned with `assignments`.
pub fn tp_fn_direction(
    x: ArrayView2<'_, f32>,
    assignments: &[Assignment],
    layer: usize,
    provenance: Provenance,
) -> Result<Direction> {
    if x.nrows() != assignments.len() {
        return Err(SteerError::Input(format!(
            "{} rows but {} assignments",
            x.nrows(),
            assignments.len()
        )));
    }
    let tp: Vec<usize> = (0..x.nrows()).filter(|&i| assignments[i] == Assignment::Tp).collect();
    let fnn: Vec<usize> = (0..x.nrows()).filter(|&i| assignments[i] == Assignment::Fn).collect();
    if tp.is_empty() || fnn.is_empty() {
        return Err(SteerError::InsufficientData(format!(
            "direction needs TP and FN cases, got {} TP and {} FN",
            tp.len(),
            fnn.len()
        )));
    }
    make_direction(
        layer,
        &order_free_mean(&x, &tp)?,
        &order_free_mean(&x, &fnn)?,
        provenance,
    )
}

/// Cosine similarity, clamped to `[−1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(SteerError::Input(format!(
            "vectors of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (l2(u), l2(v));
    if !(nu > 0.0) || !(nv > 0.0) {
        return Err(SteerError::DegenerateDirection("cosine of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Normalized standard-Gaussian direction, fixed by `seed`.
pub fn random_direction(layer: usize, d_model: usize, seed: u64) -> Result<Direction> {
    if d_model == 0 {
        return Err(SteerError::Config("random direction in zero dimensions".into()));
    }
    let mut r = rng::stream(seed, "random-direction");
    let v: Vec<f64> = (0..d_model).map(|_| StandardNormal.sample(&mut r)).collect();
    Ok(Direction {
        layer,
        vector: normalized(v, "random sample")?,
        provenance: Provenance::Random { seed },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalLayer {
    pub layer: usize,
    /// Cohen's d of FN ranks against TP ranks per layer; `None` where the
    /// pooled spread is zero.
    pub d: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
    /// Set when no layer separates the groups (largest `|d|` is zero).
    pub flagged: bool,
}

/// Layer with the largest `|d|` between FN and TP hazard-token ranks.
/// Both inputs are `layer × case`; ties go to the lower layer.
pub fn critical_layer(tp_ranks: ArrayView2<'_, f64>, fn_ranks: ArrayView2<'_, f64>) -> Result<CriticalLayer> {
    if tp_ranks.nrows() != fn_ranks.nrows() || tp_ranks.nrows() == 0 {
        return Err(SteerError::Input(format!(
            "rank tables have {} and {} layers",
            tp_ranks.nrows(),
            fn_ranks.nrows()
        )));
    }
    if tp_ranks.ncols() < 2 || fn_ranks.ncols() < 2 {
        return Err(SteerError::InsufficientData(format!(
            "critical layer needs two cases per group, got {} TP and {} FN",
            tp_ranks.ncols(),
            fn_ranks.ncols()
        )));
    }
    let mut d = Vec::with_capacity(tp_ranks.nrows());
    let mut excluded = Vec::new();
    for l in 0..tp_ranks.nrows() {
        let tp: Vec<f64> = tp_ranks.row(l).to_vec();
        let fnr: Vec<f64> = fn_ranks.row(l).to_vec();
        match cohens_d(&fnr, &tp) {
            Ok(v) => d.push(Some(v)),
            Err(SteerError::UndefinedEffect(_)) => {
                d.push(None);
                excluded.push(l);
            }
            Err(e) => return Err(e),
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (l, v) in d.iter().enumerate() {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| v.abs() > b) {
                best = Some((l, v.abs()));
            }
        }
    }
    let (layer, magnitude) =
        best.ok_or_else(|| SteerError::UndefinedEffect("hazard-rank effect size is undefined at every layer".into()))?;
    Ok(CriticalLayer {
        layer,
        d,
        excluded,
        flagged: magnitude == 0.0,
    })
}

#[cfg(test)]
mod tests;
