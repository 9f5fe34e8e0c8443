// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-level kernels shared by the forward pass, backward pass and lens.

use ndarray::{Array1, Array2, ArrayView1};

use super::ModelParams;

pub(crate) const RMS_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/π)
const GELU_K: f32 = 0.044_715;

/// `1 / sqrt(mean(x²) + ε)`.
pub(crate) fn rms_inv(x: ArrayView1<'_, f32>) -> f32 {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    1.0 / (ms + RMS_EPS).sqrt()
}

/// Row-wise RMS norm with gain `g`; returns the output and per-row scales.
pub(crate) fn rms_norm_rows(x: &Array2<f32>, g: &Array1<f32>) -> (Array2<f32>, Vec<f32>) {
    let mut out = x.clone();
    let mut invs = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let inv = rms_inv(row.view());
        row.iter_mut().zip(g.iter()).for_each(|(v, &gi)| *v = *v * inv * gi);
        invs.push(inv);
    }
    (out, invs)
}

/// Backward pass of [`rms_norm_rows`]: accumulates into `dg` and returns
/// the input gradient.
pub(crate) fn rms_norm_backward(
    x: &Array2<f32>,
    invs: &[f32],
    g: &Array1<f32>,
    dout: &Array2<f32>,
    dg: &mut Array1<f32>,
) -> Array2<f32> {
    let d = x.ncols() as f32;
    let mut dx = Array2::zeros(x.raw_dim());
    for (t, &inv) in invs.iter().enumerate() {
        let xr = x.row(t);
        let dr = dout.row(t);
        let mut dot = 0.0f32;
        for i in 0..x.ncols() {
            let n = xr[i] * inv;
            dg[i] += dr[i] * n;
            dot += dr[i] * g[i] * n;
        }
        let mut dxr = dx.row_mut(t);
        for i in 0..x.ncols() {
            let n = xr[i] * inv;
            dxr[i] = inv * (dr[i] * g[i] - n * dot / d);
        }
    }
    dx
}

pub(crate) fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f32) -> f32 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// The final normalization applied to one residual row (identity when the
/// model disables it).
pub(crate) fn final_norm_row(p: &ModelParams, h: ArrayView1<'_, f32>) -> Vec<f32> {
    if !p.config.final_norm {
        return h.to_vec();
    }
    let inv = rms_inv(h);
    h.iter().zip(p.ln_f.iter()).map(|(&v, &g)| v * inv * g).collect()
}

/// Unembedding of one normalized row: `logits[v] = Σ_i U[v, i] · n[i]`.
pub(crate) fn unembed_row(p: &ModelParams, n: &[f32]) -> Vec<f32> {
    p.unembed
        .rows()
        .into_iter()
        .map(|u| u.iter().zip(n).fold(0.0f32, |acc, (a, b)| acc + a * b))
        .collect()
}

/// Numerically stable softmax in `f64`.
pub(crate) fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
