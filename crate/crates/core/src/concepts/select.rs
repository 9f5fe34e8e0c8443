// SPDX-License-Identifier: MIT OR Apache-2.0

//! Choosing which concepts to steer and to what value.

use std::collections::BTreeSet;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::OverrideMap;
use crate::corpus::Assignment;
use crate::error::{Result, SteerError};
use crate::rng::{self, sample_without_replacement};
use crate::stats::quantile_sorted;

/// Number of concepts steered per case.
pub const DEFAULT_TOP_K: usize = 20;
/// Minimum hazard cases of a category (after leaving one out) for a
/// category-specific selection.
pub const MIN_CATEGORY_POSITIVES: usize = 3;
const SPARSE_THRESHOLD: f32 = 0.01;

/// Which cases a selection or target was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScope {
    Category,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSelection {
    pub concepts: Vec<usize>,
    pub scope: SelectionScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    TpMean,
    P95,
}

fn check_rows(
    activ: &ArrayView2<'_, f32>,
    assignments: &[Assignment],
    categories: &[String],
    case: usize,
) -> Result<()> {
    if activ.nrows() != assignments.len() || activ.nrows() != categories.len() {
        return Err(SteerError::Input(format!(
            "{} activation rows, {} assignments, {} categories",
            activ.nrows(),
            assignments.len(),
            categories.len()
        )));
    }
    if case >= activ.nrows() {
        return Err(SteerError::Input(format!(
            "case row {case} out of range ({} rows)",
            activ.nrows()
        )));
    }
    Ok(())
}

fn column_means(activ: &ArrayView2<'_, f32>, rows: &[usize]) -> Vec<f64> {
    let mut sums = vec![0.0f64; activ.ncols()];
    for &r in rows {
        for (s, &v) in sums.iter_mut().zip(activ.row(r).iter()) {
            *s += f64::from(v);
        }
    }
    sums.iter().map(|s| s / rows.len() as f64).collect()
}

/// Top-`k` concepts by `|mean(TP) − mean(FN)|` with row `case` left out.
///
/// Uses the hazard cases of the left-out case's category when at least
/// three of them remain and both TP and FN are represented; otherwise all
/// remaining TP and FN cases. Ties go to the lower concept id.
pub fn loo_select_concepts(
    activ: ArrayView2<'_, f32>,
    assignments: &[Assignment],
    categories: &[String],
    case: usize,
    k: usize,
) -> Result<ConceptSelection> {
    check_rows(&activ, assignments, categories, case)?;
    let pick = |same_category: bool| -> (Vec<usize>, Vec<usize>) {
        let mut tp = Vec::new();
        let mut fnr = Vec::new();
        for r in (0..activ.nrows()).filter(|&r| r != case) {
            if same_category && categories[r] != categories[case] {
                continue;
            }
            match assignments[r] {
                Assignment::Tp => tp.push(r),
                Assignment::Fn => fnr.push(r),
                _ => {}
            }
        }
        (tp, fnr)
    };
    let (ctp, cfn) = pick(true);
    let (tp, fnr, scope) = if ctp.len() + cfn.len() >= MIN_CATEGORY_POSITIVES && !ctp.is_empty() && !cfn.is_empty() {
        (ctp, cfn, SelectionScope::Category)
    } else {
        let (g_tp, g_fn) = pick(false);
        (g_tp, g_fn, SelectionScope::Global)
    };
    if tp.is_empty() || fnr.is_empty() {
        return Err(SteerError::InsufficientData(format!(
            "concept selection needs TP and FN cases; have {} TP and {} FN after leaving one out",
            tp.len(),
            fnr.len()
        )));
    }
    let (mt, mf) = (column_means(&activ, &tp), column_means(&activ, &fnr));
    let mut ranked: Vec<(usize, f64)> = mt.iter().zip(&mf).map(|(a, b)| (a - b).abs()).enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ConceptSelection {
        concepts: ranked.into_iter().take(k).map(|(c, _)| c).collect(),
        scope,
    })
}

/// In-distribution targets for `concepts`: the mean (or 95th percentile,
/// linear interpolation) of TP activations, excluding row `case`. With
/// [`SelectionScope::Category`] only TP cases of the same category
/// contribute.
pub fn tp_targets(
    activ: ArrayView2<'_, f32>,
    assignments: &[Assignment],
    categories: &[String],
    case: usize,
    concepts: &[usize],
    mode: TargetMode,
    scope: SelectionScope,
) -> Result<OverrideMap> {
    check_rows(&activ, assignments, categories, case)?;
    if let Some(&c) = concepts.iter().find(|&&c| c >= activ.ncols()) {
        return Err(SteerError::Input(format!(
            "concept {c} out of range ({} concepts)",
            activ.ncols()
        )));
    }
    let rows: Vec<usize> = (0..activ.nrows())
        .filter(|&r| r != case && assignments[r] == Assignment::Tp)
        .filter(|&r| scope == SelectionScope::Global || categories[r] == categories[case])
        .collect();
    let needed = match mode {
        TargetMode::TpMean => 1,
        TargetMode::P95 => 2,
    };
    if rows.len() < needed {
        return Err(SteerError::InsufficientData(format!(
            "{:?} targets need {needed} TP cases, found {}",
            mode,
            rows.len()
        )));
    }
    let mut map = OverrideMap::new();
    for &c in concepts {
        let mut values: Vec<f64> = rows.iter().map(|&r| f64::from(activ[(r, c)])).collect();
        let target = match mode {
            TargetMode::TpMean => values.iter().sum::<f64>() / values.len() as f64,
            TargetMode::P95 => {
                values.sort_by(f64::total_cmp);
                quantile_sorted(&values, 0.95)
            }
        };
        map.insert(c, (target as f32).clamp(0.0, 1.0))?;
    }
    Ok(map)
}

/// `k` concept ids drawn uniformly without replacement from those not in
/// `exclude`, in a seeded order.
pub fn random_concepts(n_concepts: usize, k: usize, exclude: &BTreeSet<usize>, seed: u64) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..n_concepts).filter(|c| !exclude.contains(c)).collect();
    sample_without_replacement(&pool, k, &mut rng::stream(seed, "random-concepts"))
        .ok_or_else(|| SteerError::InsufficientData(format!("cannot draw {k} concepts from a pool of {}", pool.len())))
}

/// Activation sparsity and the TP−FN gap on the steered concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub n_cases: usize,
    pub n_concepts: usize,
    pub fraction_below_threshold: f64,
    pub threshold: f32,
    pub mean_activation: f64,
    pub steered_tp_mean: f64,
    pub steered_fn_mean: f64,
    pub steered_gap: f64,
}

impl SparsityReport {
    pub fn to_markdown(&self) -> String {
        format!(
            "| Statistic | Value |\n|---|---|\n\
             | Cases | {} |\n| Concepts | {} |\n\
             | Fraction of activations < {} | {:.4} |\n\
             | Mean activation | {:.4} |\n\
             | Steered concepts, TP mean | {:.4} |\n\
             | Steered concepts, FN mean | {:.4} |\n\
             | TP − FN gap | {:.4} |\n",
            self.n_cases,
            self.n_concepts,
            self.threshold,
            self.fraction_below_threshold,
            self.mean_activation,
            self.steered_tp_mean,
            self.steered_fn_mean,
            self.steered_gap
        )
    }
}

pub fn sparsity_report(
    activ: ArrayView2<'_, f32>,
    assignments: &[Assignment],
    steered: &[usize],
) -> Result<SparsityReport> {
    if activ.nrows() != assignments.len() {
        return Err(SteerError::Input(format!(
            "{} rows but {} assignments",
            activ.nrows(),
            assignments.len()
        )));
    }
    if activ.is_empty() {
        return Err(SteerError::InsufficientData("no activations".into()));
    }
    if let Some(&c) = steered.iter().find(|&&c| c >= activ.ncols()) {
        return Err(SteerError::Input(format!("concept {c} out of range")));
    }
    let total = activ.len() as f64;
    let below = activ.iter().filter(|&&v| v < SPARSE_THRESHOLD).count() as f64;
    let mean = activ.iter().map(|&v| f64::from(v)).sum::<f64>() / total;
    let group_mean = |want: Assignment| -> f64 {
        let rows: Vec<usize> = (0..activ.nrows()).filter(|&r| assignments[r] == want).collect();
        if rows.is_empty() || steered.is_empty() {
            return f64::NAN;
        }
        let s: f64 = rows
            .iter()
            .flat_map(|&r| steered.iter().map(move |&c| f64::from(activ[(r, c)])))
            .sum();
        s / (rows.len() * steered.len()) as f64
    };
    let (tp, fnm) = (group_mean(Assignment::Tp), group_mean(Assignment::Fn));
    Ok(SparsityReport {
        n_cases: activ.nrows(),
        n_concepts: activ.ncols(),
        fraction_below_threshold: below / total,
        threshold: SPARSE_THRESHOLD,
        mean_activation: mean,
        steered_tp_mean: tp,
        steered_fn_mean: fnm,
        steered_gap: tp - fnm,
    })
}
