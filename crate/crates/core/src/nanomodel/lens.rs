// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hidden-state extraction and the logit lens.

use ndarray::{Array2, ArrayView1};

use super::forward::Intervention;
use super::ops::{final_norm_row, unembed_row};
use super::ModelParams;
use crate::activations::Pooling;
use crate::error::{Result, SteerError};

/// Residual stream after every block, `T × d_model` per layer.
pub fn hidden_states(model: &ModelParams, tokens: &[u32]) -> Result<Vec<Array2<f32>>> {
    Ok(model.forward(tokens, &Intervention::none())?.hidden)
}

/// One pooled vector per layer.
pub fn extract_hidden(model: &ModelParams, tokens: &[u32], pooling: Pooling) -> Result<Vec<Vec<f32>>> {
    let hidden = hidden_states(model, tokens)?;
    Ok(hidden.iter().map(|h| pool(h, pooling)).collect::<Result<_>>()?)
}

pub(crate) fn pool(h: &Array2<f32>, pooling: Pooling) -> Result<Vec<f32>> {
    match pooling {
        Pooling::LastToken => Ok(h.row(h.nrows() - 1).to_vec()),
        Pooling::MeanInput => {
            let n = h.nrows() as f64;
            Ok((0..h.ncols())
                .map(|i| (h.column(i).iter().map(|&v| f64::from(v)).sum::<f64>() / n) as f32)
                .collect())
        }
        Pooling::PerToken => Err(SteerError::Input(
            "per-token activations are not a pooled vector".into(),
        )),
    }
}

/// Projects a residual state at `layer` through the final normalization
/// and the unembedding.
pub fn logit_lens(model: &ModelParams, hidden: &[f32], layer: usize) -> Result<Vec<f32>> {
    if layer >= model.config.n_layers {
        return Err(SteerError::Input(format!(
            "layer {layer} out of range ({} layers)",
            model.config.n_layers
        )));
    }
    if hidden.len() != model.config.d_model {
        return Err(SteerError::Input(format!(
            "hidden state has length {}, model width is {}",
            hidden.len(),
            model.config.d_model
        )));
    }
    let n = final_norm_row(model, ArrayView1::from(hidden));
    Ok(unembed_row(model, &n))
}

/// Best rank among `hazard_ids`, where rank = 1 + number of tokens with a
/// strictly greater logit.
pub fn hazard_token_rank(logits: &[f32], hazard_ids: &[u32]) -> Result<usize> {
    if hazard_ids.is_empty() {
        return Err(SteerError::Input("empty hazard token list".into()));
    }
    let mut best = usize::MAX;
    for &id in hazard_ids {
        let z = *logits
            .get(id as usize)
            .ok_or_else(|| SteerError::Input(format!("hazard token {id} outside vocabulary of {}", logits.len())))?;
        best = best.min(1 + logits.iter().filter(|&&o| o > z).count());
    }
    Ok(best)
}

/// Concept weights `σ(W_c h + b)` at every position (`T × n_concepts`),
/// as predicted by the unsteered model.
pub fn concept_weights(model: &ModelParams, tokens: &[u32]) -> Result<Array2<f32>> {
    if model.concept.is_none() {
        return Err(SteerError::Config("model has no concept tap".into()));
    }
    let trace = model.forward_trace(tokens)?;
    Ok(trace.tap.expect("tap layer is within the model").weights)
}
