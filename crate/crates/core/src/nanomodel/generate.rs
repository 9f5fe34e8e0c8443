// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook specifications and autoregressive decoding.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::Intervention;
use super::ops::softmax_f64;
use super::{ModelConfig, ModelParams};
use crate::error::{Result, SteerError};
use crate::rng;
use crate::sae::{ClampPlan, SaeModel};

/// Which positions of the current sequence a hook edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookPosition {
    /// The final position of the sequence at every decode step.
    LastToken,
    AllTokens,
}

#[derive(Debug, Clone)]
pub enum HookKind {
    None,
    /// Adds `alpha · vector` to the residual stream.
    AddDirection {
        vector: Vec<f32>,
        alpha: f32,
    },
    /// Replaces the residual stream by the SAE reconstruction after clamping.
    SaeSubstitute {
        sae: Arc<SaeModel>,
        plan: ClampPlan,
    },
}

/// A residual-stream edit at the output of block `layer`.
#[derive(Debug, Clone)]
pub struct HookSpec {
    pub layer: usize,
    pub position: HookPosition,
    pub kind: HookKind,
}

impl HookSpec {
    pub fn add_direction(layer: usize, vector: Vec<f32>, alpha: f32) -> Self {
        Self {
            layer,
            position: HookPosition::LastToken,
            kind: HookKind::AddDirection { vector, alpha },
        }
    }

    pub fn sae_substitute(layer: usize, position: HookPosition, sae: Arc<SaeModel>, plan: ClampPlan) -> Self {
        Self {
            layer,
            position,
            kind: HookKind::SaeSubstitute { sae, plan },
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(SteerError::Input(format!(
                "hook layer {} out of range ({} layers)",
                self.layer, cfg.n_layers
            )));
        }
        match &self.kind {
            HookKind::None => Ok(()),
            HookKind::AddDirection { vector, alpha } => {
                if vector.len() != cfg.d_model {
                    return Err(SteerError::Input(format!(
                        "direction has length {}, model width is {}",
                        vector.len(),
                        cfg.d_model
                    )));
                }
                if !alpha.is_finite() || !vector.iter().all(|v| v.is_finite()) {
                    return Err(SteerError::Input("direction hook has non-finite values".into()));
                }
                Ok(())
            }
            HookKind::SaeSubstitute { sae, plan } => {
                if sae.d_model() != cfg.d_model {
                    return Err(SteerError::Input(format!(
                        "SAE width d_model {} does not match model {}",
                        sae.d_model(),
                        cfg.d_model
                    )));
                }
                if let Some(&id) = plan.targets().keys().find(|&&id| id >= sae.width()) {
                    return Err(SteerError::Input(format!(
                        "clamp feature {id} out of range (width {})",
                        sae.width()
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Argmax, ties to the lowest token id.
    Greedy,
    /// Sampling from `softmax(logits / t)` on a generator seeded by `seed`.
    Temperature { t: f32, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    /// Decoding stops (without emitting it) when this token is produced.
    pub stop_token: Option<u32>,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize, stop_token: Option<u32>) -> Self {
        Self {
            max_new_tokens,
            mode: DecodeMode::Greedy,
            stop_token,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(SteerError::Config("max_new_tokens must be at least 1".into()));
        }
        if let DecodeMode::Temperature { t, .. } = self.mode {
            if !(t > 0.0 && t.is_finite()) {
                return Err(SteerError::Config(format!("temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best as u32
}

impl ModelParams {
    /// Decodes up to `max_new_tokens` after `prompt`, recomputing the full
    /// sequence at every step so hooks see the current final position.
    /// Stops early at the stop token or when the context is full.
    pub fn generate(&self, prompt: &[u32], decode: &DecodeConfig, iv: &Intervention<'_>) -> Result<Vec<u32>> {
        decode.validate()?;
        self.check_tokens(prompt)?;
        self.check_intervention(iv)?;
        let mut sampler = match decode.mode {
            DecodeMode::Greedy => None,
            DecodeMode::Temperature { t, seed } => Some((t, rng::seeded(seed))),
        };
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(decode.max_new_tokens);
        while out.len() < decode.max_new_tokens && seq.len() < self.config.max_seq {
            let logits = self.forward(&seq, iv)?.last_logits();
            let next = match sampler.as_mut() {
                None => argmax(&logits),
                Some((t, rng)) => {
                    let scaled: Vec<f32> = logits.iter().map(|z| z / *t).collect();
                    let probs = softmax_f64(&scaled);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = probs.len() - 1;
                    for (i, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick as u32
                }
            };
            if Some(next) == decode.stop_token {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}
