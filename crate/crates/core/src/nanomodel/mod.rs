// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small decoder-only transformer with residual-stream hook points.
//!
//! Architecture: token + learned position embeddings, `n_layers` pre-norm
//! blocks (RMS norm, causal multi-head attention, RMS norm, GELU MLP), an
//! optional concept-bottleneck tap after one block, a final RMS norm and an
//! untied unembedding. "Layer ℓ" always means the residual stream leaving
//! block ℓ, after the concept tap and any hooks at that layer.

mod backward;
mod checkpoint;
mod forward;
mod generate;
pub mod lens;
mod ops;
mod train;

pub use checkpoint::ModelCheckpoint;
pub use forward::{ForwardOutput, Intervention};
pub use generate::{DecodeConfig, DecodeMode, HookKind, HookPosition, HookSpec};
pub use lens::{concept_weights, extract_hidden, hazard_token_rank, hidden_states, logit_lens};
pub use train::{response_target, train_toy, TrainConfig, TrainReport};

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptLayer;
use crate::error::{Result, SteerError};
use crate::rng::LabRng;

/// Where the concept bottleneck sits and how strongly it writes back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptTapConfig {
    pub n_concepts: usize,
    pub layer: usize,
    /// Coefficient on the concept features added to the residual stream.
    pub mix: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq: usize,
    pub concept: Option<ConceptTapConfig>,
    /// When false the final RMS norm is skipped (used for lens identities).
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SteerError::Config(m));
        if self.vocab == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq < 2 {
            return bad("max_seq must be at least 2".into());
        }
        if let Some(tap) = self.concept {
            if tap.layer >= self.n_layers || tap.n_concepts == 0 {
                return bad(format!("invalid concept tap {tap:?} for {} layers", self.n_layers));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: Array1<f32>,
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub ln2: Array1<f32>,
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
}

/// All trainable weights. Also used as the gradient/moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Array2<f32>,
    pub pos_emb: Array2<f32>,
    pub blocks: Vec<Block>,
    pub concept: Option<ConceptLayer>,
    pub ln_f: Array1<f32>,
    /// `vocab × d_model`.
    pub unembed: Array2<f32>,
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, m) = (config.vocab, config.d_model, config.d_mlp);
        let block = Block {
            ln1: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2: Array1::zeros(d),
            w1: Array2::zeros((d, m)),
            b1: Array1::zeros(m),
            w2: Array2::zeros((m, d)),
            b2: Array1::zeros(d),
        };
        Ok(Self {
            config,
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((config.max_seq, d)),
            blocks: vec![block; config.n_layers],
            concept: config.concept.map(|tap| ConceptLayer::zeros(tap.n_concepts, d)),
            ln_f: Array1::zeros(d),
            unembed: Array2::zeros((v, d)),
        })
    }

    /// Seeded Gaussian initialization. Norm gains start at one and concept
    /// biases at −2 so concepts begin mostly inactive.
    pub fn init(config: ModelConfig, rng: &mut LabRng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let d = config.d_model as f32;
        let depth = (2.0 * config.n_layers as f32).sqrt();
        let fill = |a: &mut [f32], std: f32, rng: &mut LabRng| {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            a.iter_mut().for_each(|x| *x = dist.sample(rng));
        };
        fill(slice_mut(&mut p.tok_emb), 0.5, rng);
        fill(slice_mut(&mut p.pos_emb), 0.1, rng);
        for b in &mut p.blocks {
            b.ln1.fill(1.0);
            b.ln2.fill(1.0);
            fill(slice_mut(&mut b.wq), 1.0 / d.sqrt(), rng);
            fill(slice_mut(&mut b.wk), 1.0 / d.sqrt(), rng);
            fill(slice_mut(&mut b.wv), 1.0 / d.sqrt(), rng);
            fill(slice_mut(&mut b.wo), 1.0 / d.sqrt() / depth, rng);
            fill(slice_mut(&mut b.w1), 1.0 / d.sqrt(), rng);
            fill(slice_mut(&mut b.w2), 1.0 / (config.d_mlp as f32).sqrt() / depth, rng);
        }
        if let Some(tap) = &mut p.concept {
            fill(slice_mut(&mut tap.w), 1.0 / d.sqrt(), rng);
            tap.b.fill(-2.0);
            fill(slice_mut(&mut tap.e), 0.05, rng);
        }
        p.ln_f.fill(1.0);
        fill(slice_mut(&mut p.unembed), 1.0 / d.sqrt(), rng);
        Ok(p)
    }

    /// Tensors in checkpoint order: `tok_emb`, `pos_emb`, per block
    /// `ln1 wq wk wv wo ln2 w1 b1 w2 b2`, concept `w b e`, `ln_f`, `unembed`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        out.push(("tok_emb".into(), self.tok_emb.shape().to_vec(), slice(&self.tok_emb)));
        out.push(("pos_emb".into(), self.pos_emb.shape().to_vec(), slice(&self.pos_emb)));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1"), b.ln1.shape().to_vec(), slice1(&b.ln1)));
            out.push((format!("blocks.{i}.wq"), b.wq.shape().to_vec(), slice(&b.wq)));
            out.push((format!("blocks.{i}.wk"), b.wk.shape().to_vec(), slice(&b.wk)));
            out.push((format!("blocks.{i}.wv"), b.wv.shape().to_vec(), slice(&b.wv)));
            out.push((format!("blocks.{i}.wo"), b.wo.shape().to_vec(), slice(&b.wo)));
            out.push((format!("blocks.{i}.ln2"), b.ln2.shape().to_vec(), slice1(&b.ln2)));
            out.push((format!("blocks.{i}.w1"), b.w1.shape().to_vec(), slice(&b.w1)));
            out.push((format!("blocks.{i}.b1"), b.b1.shape().to_vec(), slice1(&b.b1)));
            out.push((format!("blocks.{i}.w2"), b.w2.shape().to_vec(), slice(&b.w2)));
            out.push((format!("blocks.{i}.b2"), b.b2.shape().to_vec(), slice1(&b.b2)));
        }
        if let Some(tap) = &self.concept {
            out.push(("concept.w".into(), tap.w.shape().to_vec(), slice(&tap.w)));
            out.push(("concept.b".into(), tap.b.shape().to_vec(), slice1(&tap.b)));
            out.push(("concept.e".into(), tap.e.shape().to_vec(), slice(&tap.e)));
        }
        out.push(("ln_f".into(), self.ln_f.shape().to_vec(), slice1(&self.ln_f)));
        out.push(("unembed".into(), self.unembed.shape().to_vec(), slice(&self.unembed)));
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![slice_mut(&mut self.tok_emb), slice_mut(&mut self.pos_emb)];
        for b in &mut self.blocks {
            out.push(slice1_mut(&mut b.ln1));
            out.push(slice_mut(&mut b.wq));
            out.push(slice_mut(&mut b.wk));
            out.push(slice_mut(&mut b.wv));
            out.push(slice_mut(&mut b.wo));
            out.push(slice1_mut(&mut b.ln2));
            out.push(slice_mut(&mut b.w1));
            out.push(slice1_mut(&mut b.b1));
            out.push(slice_mut(&mut b.w2));
            out.push(slice1_mut(&mut b.b2));
        }
        if let Some(tap) = &mut self.concept {
            out.push(slice_mut(&mut tap.w));
            out.push(slice1_mut(&mut tap.b));
            out.push(slice_mut(&mut tap.e));
        }
        out.push(slice1_mut(&mut self.ln_f));
        out.push(slice_mut(&mut self.unembed));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, s)| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, s)| s.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub(crate) fn add_assign(&mut self, other: &ModelParams) {
        let src = other.tensors();
        for (dst, (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
    }
}

fn slice(a: &Array2<f32>) -> &[f32] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice1(a: &Array1<f32>) -> &[f32] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice_mut(a: &mut Array2<f32>) -> &mut [f32] {
    a.as_slice_mut().expect("parameters are contiguous")
}

fn slice1_mut(a: &mut Array1<f32>) -> &mut [f32] {
    a.as_slice_mut().expect("parameters are contiguous")
}

#[cfg(test)]
mod tests;
