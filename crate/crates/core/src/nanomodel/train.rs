// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training the toy triage model with Adam and deterministic data-parallel
//! gradient reduction.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backward::{loss_and_grad, loss_only};
use super::{ConceptTapConfig, ModelConfig, ModelParams};
use crate::corpus::vocab::{BENIGN_RESPONSE, HAZARD_RESPONSES};
use crate::corpus::{build_prompt, Case, CaseSet, PromptCondition, Vocabulary};
use crate::error::{Result, SteerError};
use crate::rng::{self, LabRng};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq: usize,
    pub concept: Option<ConceptTapConfig>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the end of the cosine schedule, as a fraction of `lr`.
    pub final_lr_fraction: f64,
    pub grad_clip: f64,
    /// Probability that a low-salience hazard case is taught the benign response.
    pub noise_rate: f64,
    /// Hazard cases with at most this many marker pairs are low-salience.
    pub noise_max_salience: usize,
    /// Fraction of training prompts that carry the safety suffix.
    pub suffix_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_mlp: 128,
            max_seq: 40,
            concept: Some(ConceptTapConfig {
                n_concepts: 32,
                layer: 1,
                mix: 1.0,
            }),
            epochs: 20,
            batch_size: 16,
            lr: 3e-3,
            final_lr_fraction: 0.1,
            grad_clip: 1.0,
            noise_rate: 0.4,
            noise_max_salience: 1,
            suffix_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            max_seq: self.max_seq,
            concept: self.concept,
            final_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SteerError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad(format!(
                "invalid learning rate schedule {} / {}",
                self.lr, self.final_lr_fraction
            ));
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        for (name, p) in [
            ("noise_rate", self.noise_rate),
            ("suffix_fraction", self.suffix_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// The response a case is taught on one draw: one of the hazard responses
/// (uniformly), or the benign response for benign cases and, with
/// probability `noise_rate`, for low-salience hazards.
pub fn response_target(
    case: &Case,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> &'static [&'static str] {
    if !case.label.is_hazard() {
        return BENIGN_RESPONSE;
    }
    let pick = rng.random_range(0..HAZARD_RESPONSES.len());
    let noisy = rng.random_bool(cfg.noise_rate);
    if noisy && vocab.marker_count(&case.text) <= cfg.noise_max_salience {
        BENIGN_RESPONSE
    } else {
        HAZARD_RESPONSES[pick]
    }
}

struct Example {
    tokens: Vec<u32>,
    loss_positions: Vec<usize>,
}

fn make_example(case: &Case, vocab: &Vocabulary, cfg: &TrainConfig, rng: &mut LabRng) -> Result<Example> {
    let condition = if rng.random_bool(cfg.suffix_fraction) {
        PromptCondition::SafetySuffix
    } else {
        PromptCondition::Standard
    };
    let mut tokens = vocab.encode_prompt(&build_prompt(case, condition)?)?;
    let start = tokens.len() - 1;
    tokens.extend(vocab.encode_words(response_target(case, vocab, cfg, rng))?);
    tokens.push(vocab.eos_id());
    if tokens.len() > cfg.max_seq {
        return Err(SteerError::Config(format!(
            "case {} needs {} tokens, max_seq is {}",
            case.id,
            tokens.len(),
            cfg.max_seq
        )));
    }
    let loss_positions = (start..tokens.len() - 1).collect();
    Ok(Example { tokens, loss_positions })
}

fn examples(corpus: &CaseSet, vocab: &Vocabulary, cfg: &TrainConfig, seed: u64, tag: &str) -> Result<Vec<Example>> {
    corpus
        .cases()
        .iter()
        .map(|c| make_example(c, vocab, cfg, &mut rng::stream(seed, &format!("{tag}/{}", c.id))))
        .collect()
}

fn mean_loss(model: &ModelParams, data: &[Example]) -> Result<f64> {
    let losses: Vec<f64> = data
        .par_iter()
        .map(|e| loss_only(model, &e.tokens, &e.loss_positions))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, (_, _, g)), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..p.len() {
                let gi = f64::from(g[i]);
                let mi = BETA1 * f64::from(m[i]) + (1.0 - BETA1) * gi;
                let vi = BETA2 * f64::from(v[i]) + (1.0 - BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                p[i] = (f64::from(p[i]) - update) as f32;
            }
        }
    }
}

fn global_norm(g: &ModelParams) -> f64 {
    g.tensors()
        .iter()
        .flat_map(|(_, _, s)| s.iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Trains a model on `corpus`. Per-sequence gradients are computed in
/// parallel and summed in batch order, so the result does not depend on
/// the number of threads.
pub fn train_toy(
    corpus: &CaseSet,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(SteerError::InsufficientData("empty training corpus".into()));
    }
    let model_cfg = cfg.model_config(vocab.len());
    let mut params = ModelParams::init(model_cfg, &mut rng::stream(seed, "init"))?;
    let probe_set = examples(corpus, vocab, cfg, seed, "eval")?;
    let initial_loss = mean_loss(&params, &probe_set)?;
    let mut adam = Adam {
        m: ModelParams::zeros(model_cfg)?,
        v: ModelParams::zeros(model_cfg)?,
        t: 0,
    };
    let n_batches = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = (n_batches * cfg.epochs).max(1);
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let data = examples(corpus, vocab, cfg, seed, &format!("epoch{epoch}"))?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(seed, &format!("shuffle/{epoch}")));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, ModelParams)> = batch
                .par_iter()
                .map(|&i| loss_and_grad(&params, &data[i].tokens, &data[i].loss_positions))
                .collect::<Result<_>>()?;
            let mut grad = ModelParams::zeros(model_cfg)?;
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grad.add_assign(g);
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(SteerError::Divergence { step, loss });
            }
            let norm = global_norm(&grad) * scale;
            let clip = if norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            };
            for t in grad.tensors_mut() {
                t.iter_mut().for_each(|v| *v = (f64::from(*v) * scale * clip) as f32);
            }
            let progress = step as f64 / total_steps as f64;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let lr = cfg.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
            adam.step(&mut params, &grad, lr);
            step += 1;
            epoch_loss += loss * batch.len() as f64;
            if !params.all_finite() {
                return Err(SteerError::Divergence { step, loss: f64::NAN });
            }
        }
        epoch_losses.push(epoch_loss / corpus.len() as f64);
    }
    let final_loss = mean_loss(&params, &probe_set)?;
    if !final_loss.is_finite() {
        return Err(SteerError::Divergence { step, loss: final_loss });
    }
    Ok((
        params,
        TrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
            steps: step,
        },
    ))
}
