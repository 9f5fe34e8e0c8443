// SPDX-License-Identifier: MIT OR Apache-2.0

//! `STLM0001` model checkpoints.
//!
//! Layout: magic `STLM0001`, `u32` little-endian header length, JSON header
//! `{version, config, seed, vocab, tensors: [{name, shape}]}`, then every
//! tensor as row-major little-endian `f32` in the order listed by
//! [`ModelParams::tensors`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::binfmt;
use crate::error::{Result, SteerError};

pub const MAGIC: &[u8; 8] = b"STLM0001";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    seed: u64,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// Trained weights with the seed and vocabulary they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: ModelParams,
    pub seed: u64,
    pub vocab: Vec<String>,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.vocab.len() != self.params.config.vocab {
            return Err(SteerError::Input(format!(
                "{} vocabulary tokens for a model of vocab {}",
                self.vocab.len(),
                self.params.config.vocab
            )));
        }
        let tensors = self.params.tensors();
        let header = Header {
            version: VERSION,
            config: self.params.config,
            seed: self.seed,
            vocab: self.vocab.clone(),
            tensors: tensors
                .iter()
                .map(|(n, s, _)| TensorEntry {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let payload: Vec<&[f32]> = tensors.iter().map(|(_, _, d)| *d).collect();
        binfmt::write(path, MAGIC, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = binfmt::read::<Header>(path, MAGIC)?;
        let h = c.header;
        let bad = |m: String| SteerError::format(path, binfmt::MAGIC_LEN as u64 + 4, m);
        if h.version != VERSION {
            return Err(bad(format!("unsupported version {}", h.version)));
        }
        let mut params = ModelParams::zeros(h.config).map_err(|e| bad(e.to_string()))?;
        let expected: Vec<TensorEntry> = params
            .tensors()
            .iter()
            .map(|(n, s, _)| TensorEntry {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect();
        if expected != h.tensors {
            return Err(bad("tensor list does not match the configuration".into()));
        }
        if h.vocab.len() != h.config.vocab {
            return Err(bad(format!(
                "{} vocabulary tokens for vocab {}",
                h.vocab.len(),
                h.config.vocab
            )));
        }
        let total = params.n_params();
        binfmt::check_payload_len(path, c.payload_offset, c.payload.len(), total)?;
        binfmt::check_finite(path, c.payload_offset, &c.payload)?;
        let mut offset = 0;
        for dst in params.tensors_mut() {
            let n = dst.len();
            dst.copy_from_slice(&c.payload[offset..offset + n]);
            offset += n;
        }
        Ok(Self {
            params,
            seed: h.seed,
            vocab: h.vocab,
        })
    }
}
