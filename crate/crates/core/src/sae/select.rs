// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hazard-feature selection by Mann-Whitney U with Benjamini-Hochberg
//! correction, and the clamp plans built from it.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{ClampMode, ClampPlan, SaeModel};
use crate::activations::ActivationTensor;
use crate::corpus::Assignment;
use crate::error::{Result, SteerError};
use crate::rng::{self, sample_without_replacement};
use crate::stats::{bh_adjust, mann_whitney};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: usize,
    /// U statistic of hazard cases against benign cases.
    pub u: f64,
    pub p: f64,
    /// Benjamini-Hochberg adjusted p value.
    pub q: f64,
    pub tp_mean: f64,
    pub fn_mean: f64,
    pub benign_mean: f64,
    /// Hazard cases score higher than benign cases on average.
    pub positive: bool,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub q_threshold: f64,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    /// Significant, hazard-positive features ordered by p value then id.
    pub fn hazard_features(&self) -> Vec<usize> {
        let mut rows: Vec<&FeatureRow> = self.rows.iter().filter(|r| r.significant && r.positive).collect();
        rows.sort_by(|a, b| a.p.total_cmp(&b.p).then(a.id.cmp(&b.id)));
        rows.into_iter().map(|r| r.id).collect()
    }

    pub fn n_significant(&self) -> usize {
        self.rows.iter().filter(|r| r.significant).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,u,p,q,tp_mean,fn_mean,benign_mean,positive,significant\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:e},{:e},{},{},{},{},{}\n",
                r.id, r.u, r.p, r.q, r.tp_mean, r.fn_mean, r.benign_mean, r.positive, r.significant
            ));
        }
        out
    }
}

/// Per-case mean feature activations over each case's token rows, in the
/// order of `case_ids`.
pub fn case_feature_means(sae: &SaeModel, acts: &ActivationTensor, case_ids: &[String]) -> Result<Array2<f32>> {
    if acts.cols != sae.d_model() {
        return Err(SteerError::Input(format!(
            "activations have {} columns, SAE expects {}",
            acts.cols,
            sae.d_model()
        )));
    }
    let position: std::collections::HashMap<&str, usize> =
        case_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut sums = Array2::<f64>::zeros((case_ids.len(), sae.width()));
    let mut counts = vec![0usize; case_ids.len()];
    for r in 0..acts.rows() {
        let Some(&i) = position.get(acts.row_index.case_id(r)) else {
            continue;
        };
        let f = sae.encode(acts.row(r))?;
        for (s, v) in sums.row_mut(i).iter_mut().zip(f) {
            *s += f64::from(v);
        }
        counts[i] += 1;
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(SteerError::Input(format!(
            "no activation rows for case {}",
            case_ids[i]
        )));
    }
    Ok(Array2::from_shape_fn(sums.raw_dim(), |(i, j)| {
        (sums[(i, j)] / counts[i] as f64) as f32
    }))
}

fn group_mean(col: &[f64], assignments: &[Assignment], want: &[Assignment]) -> f64 {
    let vals: Vec<f64> = col
        .iter()
        .zip(assignments)
        .filter(|(_, a)| want.contains(a))
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Two-sided Mann-Whitney U of hazard (TP ∪ FN) against benign (FP ∪ TN)
/// cases for every feature, BH-corrected across features; a feature is
/// significant when its adjusted value is below `q`.
pub fn select_features(case_means: ArrayView2<'_, f32>, assignments: &[Assignment], q: f64) -> Result<FeatureTable> {
    if case_means.nrows() != assignments.len() {
        return Err(SteerError::Input(format!(
            "{} cases but {} assignments",
            case_means.nrows(),
            assignments.len()
        )));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(SteerError::Config(format!("q must lie in (0, 1], got {q}")));
    }
    let hazard: Vec<bool> = assignments
        .iter()
        .map(|a| matches!(a, Assignment::Tp | Assignment::Fn))
        .collect();
    let n_h = hazard.iter().filter(|&&h| h).count();
    let n_b = hazard.len() - n_h;
    if n_h < 2 || n_b < 2 {
        return Err(SteerError::InsufficientData(format!(
            "feature selection needs two cases per class, have {n_h} hazard and {n_b} benign"
        )));
    }
    let mut rows = Vec::with_capacity(case_means.ncols());
    let mut ps = Vec::with_capacity(case_means.ncols());
    for (id, col) in case_means.columns().into_iter().enumerate() {
        let col: Vec<f64> = col.iter().map(|&v| f64::from(v)).collect();
        let x: Vec<f64> = col.iter().zip(&hazard).filter(|(_, &h)| h).map(|(&v, _)| v).collect();
        let y: Vec<f64> = col.iter().zip(&hazard).filter(|(_, &h)| !h).map(|(&v, _)| v).collect();
        let test = mann_whitney(&x, &y)?;
        ps.push(test.p);
        rows.push(FeatureRow {
            id,
            u: test.u,
            p: test.p,
            q: f64::NAN,
            tp_mean: group_mean(&col, assignments, &[Assignment::Tp]),
            fn_mean: group_mean(&col, assignments, &[Assignment::Fn]),
            benign_mean: group_mean(&col, assignments, &[Assignment::Fp, Assignment::Tn]),
            positive: test.u > (n_h * n_b) as f64 / 2.0,
            significant: false,
        });
    }
    for (row, adj) in rows.iter_mut().zip(bh_adjust(&ps)?) {
        row.q = adj;
        row.significant = adj < q;
    }
    Ok(FeatureTable { q_threshold: q, rows })
}

/// Clamp the given features to `multiplier ×` their TP mean.
pub fn build_clamp_plan(table: &FeatureTable, features: &[usize], multiplier: f32) -> Result<ClampPlan> {
    plan_for(table, features, multiplier, ClampMode::HazardTopK)
}

/// A control plan over `k` features drawn uniformly from the
/// non-significant ones, clamped the same way.
pub fn random_clamp_plan(table: &FeatureTable, k: usize, multiplier: f32, seed: u64) -> Result<ClampPlan> {
    let pool: Vec<usize> = table.rows.iter().filter(|r| !r.significant).map(|r| r.id).collect();
    let ids = sample_without_replacement(&pool, k, &mut rng::stream(seed, "random-features")).ok_or_else(|| {
        SteerError::InsufficientData(format!(
            "cannot draw {k} control features from {} non-significant",
            pool.len()
        ))
    })?;
    plan_for(table, &ids, multiplier, ClampMode::RandomControl)
}

fn plan_for(table: &FeatureTable, features: &[usize], multiplier: f32, mode: ClampMode) -> Result<ClampPlan> {
    if !(multiplier >= 0.0 && multiplier.is_finite()) {
        return Err(SteerError::Config(format!(
            "clamp multiplier must be finite and ≥ 0, got {multiplier}"
        )));
    }
    let mut targets = BTreeMap::new();
    for &id in features {
        let row = table
            .rows
            .get(id)
            .ok_or_else(|| SteerError::Input(format!("feature {id} out of range ({} features)", table.rows.len())))?;
        targets.insert(id, multiplier * row.tp_mean.max(0.0) as f32);
    }
    ClampPlan::new(targets, multiplier, mode)
}
