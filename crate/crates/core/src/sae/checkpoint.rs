// SPDX-License-Identifier: MIT OR Apache-2.0

//! `SAEM0001` checkpoints: magic, `u32` little-endian header length, JSON
//! header `{version, d_model, width, l1_coeff, layer, seed}`, then
//! `w_enc`, `b_enc`, `w_dec`, `b_dec` as row-major little-endian `f32`.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::SaeModel;
use crate::binfmt;
use crate::error::{Result, SteerError};

pub const MAGIC: &[u8; 8] = b"SAEM0001";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    d_model: usize,
    width: usize,
    l1_coeff: f32,
    layer: usize,
    seed: u64,
}

/// A trained SAE with the residual layer it reads and its training seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeCheckpoint {
    pub sae: SaeModel,
    pub layer: usize,
    pub seed: u64,
}

impl SaeCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = &self.sae;
        let header = Header {
            version: VERSION,
            d_model: s.d_model(),
            width: s.width(),
            l1_coeff: s.l1_coeff,
            layer: self.layer,
            seed: self.seed,
        };
        let parts = [
            &s.w_enc.as_slice(),
            &s.b_enc.as_slice(),
            &s.w_dec.as_slice(),
            &s.b_dec.as_slice(),
        ];
        let payload: Vec<&[f32]> = parts.iter().map(|p| p.expect("contiguous")).collect();
        binfmt::write(path, MAGIC, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = binfmt::read::<Header>(path, MAGIC)?;
        let h = c.header;
        let bad = |m: String| SteerError::format(path, binfmt::MAGIC_LEN as u64 + 4, m);
        if h.version != VERSION {
            return Err(bad(format!("unsupported version {}", h.version)));
        }
        let (d, w) = (h.d_model, h.width);
        let expected = 2 * d * w + d + w;
        binfmt::check_payload_len(path, c.payload_offset, c.payload.len(), expected)?;
        binfmt::check_finite(path, c.payload_offset, &c.payload)?;
        let p = &c.payload;
        let w_enc = Array2::from_shape_vec((d, w), p[..d * w].to_vec()).expect("sized");
        let b_enc = Array1::from(p[d * w..d * w + w].to_vec());
        let w_dec = Array2::from_shape_vec((w, d), p[d * w + w..2 * d * w + w].to_vec()).expect("sized");
        let b_dec = Array1::from(p[2 * d * w + w..].to_vec());
        let sae = SaeModel::new(w_enc, b_enc, w_dec, b_dec, h.l1_coeff).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            sae,
            layer: h.layer,
            seed: h.seed,
        })
    }
}
