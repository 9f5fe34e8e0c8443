// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dictionary learning with Adam and per-step decoder renormalization.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{SaeModel, DEFAULT_L1};
use crate::activations::ActivationTensor;
use crate::error::{Result, SteerError};
use crate::rng;

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeTrainConfig {
    pub width: usize,
    pub l1_coeff: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            width: 512,
            l1_coeff: DEFAULT_L1,
            epochs: 8,
            batch_size: 256,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainReport {
    /// Mean loss over the last epoch (the initial loss when `epochs == 0`).
    pub final_loss: f64,
    /// Mean number of active features per row on the training data.
    pub mean_l0: f64,
    /// Features that never fired during the last epoch.
    pub dead_features: usize,
    /// Fraction of variance unexplained on the training data:
    /// `Σ‖ĥ − h‖² / Σ‖h − h̄‖²`.
    pub fvu: f64,
    /// `‖Ĥ − H‖_F / ‖H‖_F` on the training data.
    pub relative_norm_error: f64,
    /// Largest deviation of a decoder atom from unit norm, checked after
    /// every optimizer step.
    pub max_atom_norm_error: f32,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, p: &mut [f32], g: &[f32], lr: f32, t: i32) {
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for i in 0..p.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + ADAM_EPS);
        }
    }
}

/// `(F, Ĥ)` for a batch of rows.
pub(crate) fn forward_batch(sae: &SaeModel, h: &ArrayView2<'_, f32>) -> (Array2<f32>, Array2<f32>) {
    let mut z = h.dot(&sae.w_enc);
    z += &sae.b_enc.view().insert_axis(Axis(0));
    z.mapv_inplace(|v| v.max(0.0));
    let mut h_hat = z.dot(&sae.w_dec);
    h_hat += &sae.b_dec.view().insert_axis(Axis(0));
    (z, h_hat)
}

/// Mean squared reconstruction error (over rows and dimensions) plus
/// `l1 ×` the mean per-row L1 norm of the features.
fn batch_loss(f: &Array2<f32>, residual: &Array2<f32>, l1: f32) -> f64 {
    let sq: f64 = residual.iter().map(|&r| f64::from(r) * f64::from(r)).sum();
    let act: f64 = f.iter().map(|&v| f64::from(v)).sum();
    sq / residual.len() as f64 + f64::from(l1) * act / f.nrows() as f64
}

fn init(data: &ArrayView2<'_, f32>, cfg: &SaeTrainConfig, seed: u64) -> SaeModel {
    let d = data.ncols();
    let mut r = rng::stream(seed, "sae-init");
    let w_dec = Array2::from_shape_simple_fn((cfg.width, d), || StandardNormal.sample(&mut r));
    let b_dec = if data.nrows() > 0 {
        data.mean_axis(Axis(0)).expect("non-empty")
    } else {
        Array1::zeros(d)
    };
    let mut sae = SaeModel {
        w_enc: Array2::zeros((d, cfg.width)),
        b_enc: Array1::zeros(cfg.width),
        w_dec,
        b_dec,
        l1_coeff: cfg.l1_coeff,
    };
    sae.renormalize_decoder();
    sae.w_enc = sae.w_dec.t().as_standard_layout().into_owned();
    sae
}

/// Trains an SAE on the rows of `acts`. Rows are visited in a seeded
/// shuffle each epoch; decoder atoms are renormalized after every step.
pub fn train_sae(acts: &ActivationTensor, cfg: &SaeTrainConfig, seed: u64) -> Result<(SaeModel, SaeTrainReport)> {
    if cfg.width == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.l1_coeff >= 0.0) {
        return Err(SteerError::Config(format!(
            "invalid SAE training configuration {cfg:?}"
        )));
    }
    if acts.rows() < cfg.batch_size {
        return Err(SteerError::InsufficientData(format!(
            "{} activation rows, fewer than the batch size {}",
            acts.rows(),
            cfg.batch_size
        )));
    }
    let data = acts.view();
    let mut sae = init(&data, cfg, seed);
    let (d, width) = (sae.d_model(), sae.width());
    let mut moments = [
        Moments::new(d * width),
        Moments::new(width),
        Moments::new(width * d),
        Moments::new(d),
    ];
    let mut max_norm_err = sae.max_atom_norm_error();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut fired = vec![false; width];
    let mut step = 0i32;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        order.shuffle(&mut rng::stream(seed, &format!("sae-shuffle/{epoch}")));
        fired.iter_mut().for_each(|f| *f = false);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let h = data.select(Axis(0), batch);
            let (f, h_hat) = forward_batch(&sae, &h.view());
            let residual = &h_hat - &h;
            let loss = batch_loss(&f, &residual, sae.l1_coeff);
            if !loss.is_finite() {
                return Err(SteerError::Divergence {
                    step: step as usize,
                    loss,
                });
            }
            total += loss * batch.len() as f64;
            for row in f.rows() {
                for (j, &v) in row.iter().enumerate() {
                    fired[j] |= v > 0.0;
                }
            }
            let scale = 2.0 / residual.len() as f32;
            let dh_hat = residual.mapv(|r| r * scale);
            let g_wdec = f.t().dot(&dh_hat).as_standard_layout().into_owned();
            let g_bdec = dh_hat.sum_axis(Axis(0));
            let l1_grad = sae.l1_coeff / batch.len() as f32;
            let mut dz = dh_hat.dot(&sae.w_dec.t());
            dz.zip_mut_with(&f, |g, &fv| *g = if fv > 0.0 { *g + l1_grad } else { 0.0 });
            let g_wenc = h.t().dot(&dz).as_standard_layout().into_owned();
            let g_benc = dz.sum_axis(Axis(0));
            step += 1;
            let params: [(&mut [f32], &[f32]); 4] = [
                (
                    sae.w_enc.as_slice_mut().expect("contiguous"),
                    g_wenc.as_slice().expect("contiguous"),
                ),
                (
                    sae.b_enc.as_slice_mut().expect("contiguous"),
                    g_benc.as_slice().expect("contiguous"),
                ),
                (
                    sae.w_dec.as_slice_mut().expect("contiguous"),
                    g_wdec.as_slice().expect("contiguous"),
                ),
                (
                    sae.b_dec.as_slice_mut().expect("contiguous"),
                    g_bdec.as_slice().expect("contiguous"),
                ),
            ];
            for ((p, g), m) in params.into_iter().zip(moments.iter_mut()) {
                m.step(p, g, cfg.lr, step);
            }
            sae.renormalize_decoder();
            max_norm_err = max_norm_err.max(sae.max_atom_norm_error());
            if !sae.all_finite() {
                return Err(SteerError::Divergence {
                    step: step as usize,
                    loss: f64::NAN,
                });
            }
        }
        epoch_losses.push(total / data.nrows() as f64);
    }
    let (f, h_hat) = forward_batch(&sae, &data);
    let residual = &h_hat - &data;
    let full_loss = batch_loss(&f, &residual, sae.l1_coeff);
    let num: f64 = residual.iter().map(|&r| f64::from(r) * f64::from(r)).sum();
    let den: f64 = data.iter().map(|&r| f64::from(r) * f64::from(r)).sum();
    let mean = data
        .mapv(f64::from)
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(d));
    let var: f64 = data
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(mean.iter())
                .map(|(&v, m)| (f64::from(v) - m).powi(2))
                .sum::<f64>()
        })
        .sum();
    let l0 = f.iter().filter(|&&v| v > 0.0).count() as f64 / data.nrows() as f64;
    let dead = if cfg.epochs == 0 {
        (0..width).filter(|&j| f.column(j).iter().all(|&v| v <= 0.0)).count()
    } else {
        fired.iter().filter(|&&x| !x).count()
    };
    let report = SaeTrainReport {
        final_loss: epoch_losses.last().copied().unwrap_or(full_loss),
        mean_l0: l0,
        dead_features: dead,
        fvu: if var > 0.0 { num / var } else { 0.0 },
        relative_norm_error: if den > 0.0 { (num / den).sqrt() } else { 0.0 },
        max_atom_norm_error: max_norm_err,
        epoch_losses,
        steps: step as usize,
    };
    Ok((sae, report))
}
