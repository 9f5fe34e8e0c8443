// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-validated per-layer probes.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logistic::{fit_logistic, DEFAULT_TOL};
use crate::activations::{read_tensor, ActivationTensor, Pooling};
use crate::error::{Result, SteerError};
use crate::rng;
use crate::stats::{auroc, auroc_ci, Interval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub folds: usize,
    pub c_grid: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            c_grid: vec![0.01, 0.1, 1.0, 10.0],
            bootstrap_resamples: 1000,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(SteerError::Config(format!(
                "probe needs at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(SteerError::Config(format!(
                "C grid must be nonempty and positive, got {:?}",
                self.c_grid
            )));
        }
        if self.bootstrap_resamples == 0 {
            return Err(SteerError::Config("probe needs at least one bootstrap resample".into()));
        }
        Ok(())
    }
}

/// Mean out-of-fold AUROC for one value of `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub c: f64,
    pub mean_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub layer: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub best_c: f64,
    /// Out-of-fold accuracy at the chosen `C` (threshold at probability 0.5).
    pub cv_accuracy: f64,
    /// Mean fold AUROC at the chosen `C`.
    pub cv_auroc: f64,
    /// Bootstrap interval over the pooled out-of-fold scores.
    pub auroc_ci: Interval,
    pub grid: Vec<GridPoint>,
}

impl ProbeResult {
    pub fn score(&self, x: &[f32]) -> f64 {
        x.iter().zip(&self.weights).map(|(&a, w)| f64::from(a) * w).sum::<f64>() + self.bias
    }
}

/// Fold index per case. Each class is shuffled with a seeded stream and
/// dealt round-robin, so every fold's count of either class is within one
/// of `class_size / folds`.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds == 0 {
        return Err(SteerError::Config("zero folds".into()));
    }
    let mut out = vec![0usize; labels.len()];
    let mut offset = 0;
    for (class, label) in [(1u8, true), (0u8, false)] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng::stream(seed, &format!("probe-folds/{class}")));
        for (k, &i) in idx.iter().enumerate() {
            out[i] = (k + offset) % folds;
        }
        offset = (offset + idx.len()) % folds;
    }
    Ok(out)
}

fn to_f64(x: &ArrayView2<'_, f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

/// Probe on a case-by-feature matrix. See [`train_probe`].
pub fn train_probe_matrix(
    x: ArrayView2<'_, f32>,
    labels: &[bool],
    layer: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    if x.nrows() != labels.len() {
        return Err(SteerError::Input(format!(
            "{} rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos < cfg.folds || n_neg < cfg.folds {
        return Err(SteerError::InsufficientData(format!(
            "probe needs at least {} cases per class, got {n_pos} positive and {n_neg} negative",
            cfg.folds
        )));
    }
    let xf = to_f64(&x);
    let folds = stratified_folds(labels, cfg.folds, cfg.seed)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.c_grid.len())
        .flat_map(|c| (0..cfg.folds).map(move |f| (c, f)))
        .collect();
    let fold_scores: Vec<Result<(Vec<usize>, Vec<f64>)>> = jobs
        .par_iter()
        .map(|&(ci, fold)| {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != fold).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == fold).collect();
            let xt = xf.select(Axis(0), &train);
            let yt: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            let fit = fit_logistic(&xt.view(), &yt, cfg.c_grid[ci], cfg.tol)?;
            Ok((test.clone(), fit.scores(&xf.select(Axis(0), &test).view())))
        })
        .collect();
    let fold_scores = fold_scores.into_iter().collect::<Result<Vec<_>>>()?;
    let mut grid = Vec::with_capacity(cfg.c_grid.len());
    let mut best = 0;
    for (ci, &c) in cfg.c_grid.iter().enumerate() {
        let mut total = 0.0;
        for (test, scores) in &fold_scores[ci * cfg.folds..(ci + 1) * cfg.folds] {
            let l: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
            total += auroc(scores, &l)?;
        }
        grid.push(GridPoint {
            c,
            mean_auroc: total / cfg.folds as f64,
        });
        if grid[ci].mean_auroc > grid[best].mean_auroc {
            best = ci;
        }
    }
    let mut oof = vec![0.0; labels.len()];
    for (test, scores) in &fold_scores[best * cfg.folds..(best + 1) * cfg.folds] {
        for (&i, &s) in test.iter().zip(scores) {
            oof[i] = s;
        }
    }
    let correct = oof.iter().zip(labels).filter(|(&s, &l)| (s > 0.0) == l).count();
    let ci_seed = rng::stable_hash(&format!("{}/probe-ci/{layer}", cfg.seed));
    let interval = auroc_ci(&oof, labels, cfg.bootstrap_resamples, ci_seed)?;
    let best_c = cfg.c_grid[best];
    let fit = fit_logistic(&xf.view(), labels, best_c, cfg.tol)?;
    Ok(ProbeResult {
        layer,
        weights: fit.weights,
        bias: fit.bias,
        best_c,
        cv_accuracy: correct as f64 / labels.len() as f64,
        cv_auroc: grid[best].mean_auroc,
        auroc_ci: interval,
        grid,
    })
}

fn check_case_pooled(acts: &ActivationTensor) -> Result<()> {
    if acts.pooling == Pooling::PerToken {
        return Err(SteerError::Input(format!(
            "layer {} activations are per-token, probes need one row per case",
            acts.layer
        )));
    }
    Ok(())
}

/// Stratified cross-validated probe for `labels` (one per row of `acts`).
/// `C` is chosen by mean fold AUROC (ties to the earlier grid entry) and
/// the probe is refit on every case at that value.
pub fn train_probe(acts: &ActivationTensor, labels: &[bool], cfg: &ProbeConfig) -> Result<ProbeResult> {
    check_case_pooled(acts)?;
    train_probe_matrix(acts.view(), labels, acts.layer, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSweep {
    pub results: Vec<ProbeResult>,
    pub best_layer: usize,
}

impl ProbeSweep {
    pub fn best(&self) -> &ProbeResult {
        &self.results[self.best_layer]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,best_c,cv_accuracy,cv_auroc,auroc_lo,auroc_hi,best\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.layer,
                r.best_c,
                r.cv_accuracy,
                r.cv_auroc,
                r.auroc_ci.lo,
                r.auroc_ci.hi,
                r.layer == self.best_layer
            ));
        }
        out
    }
}

/// Probes for tensors of layers `0..n`, in order. The best layer has the
/// highest `cv_auroc`, ties going to the lower layer.
pub fn probe_sweep_tensors(tensors: &[ActivationTensor], labels: &[bool], cfg: &ProbeConfig) -> Result<ProbeSweep> {
    if tensors.is_empty() {
        return Err(SteerError::InsufficientData("probe sweep over zero layers".into()));
    }
    for (l, t) in tensors.iter().enumerate() {
        if t.layer != l {
            return Err(SteerError::Input(format!(
                "tensor {l} of the sweep holds layer {}",
                t.layer
            )));
        }
        if t.row_index != tensors[0].row_index {
            return Err(SteerError::Input(format!(
                "layer {l} rows are not aligned with layer 0"
            )));
        }
    }
    let results = tensors
        .iter()
        .map(|t| train_probe(t, labels, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut best_layer = 0;
    for r in &results {
        if r.cv_auroc > results[best_layer].cv_auroc {
            best_layer = r.layer;
        }
    }
    Ok(ProbeSweep { results, best_layer })
}

/// Loads layers `0..n_layers` with `pooling` from `dir` and sweeps them.
pub fn probe_sweep(
    dir: &Path,
    n_layers: usize,
    pooling: Pooling,
    labels: &[bool],
    cfg: &ProbeConfig,
) -> Result<ProbeSweep> {
    let mut tensors = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let path = ActivationTensor::path_in(dir, layer, pooling);
        if !path.exists() {
            return Err(SteerError::Input(format!(
                "missing activations for layer {layer}: {}",
                path.display()
            )));
        }
        tensors.push(read_tensor(&path)?);
    }
    probe_sweep_tensors(&tensors, labels, cfg)
}
