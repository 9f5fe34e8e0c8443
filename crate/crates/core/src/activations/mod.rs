// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer activation matrices and their `ACTV0001` file format.
//!
//! Layout: magic `ACTV0001`, `u32` little-endian header length, UTF-8 JSON
//! header `{version, layer, pooling, rows, cols, dtype: "f32le", row_index}`,
//! then `rows × cols` row-major little-endian `f32` values.

use std::path::{Path, PathBuf};

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{Result, SteerError};

pub const MAGIC: &[u8; 8] = b"ACTV0001";
pub const VERSION: u32 = 1;
const DTYPE: &str = "f32le";

/// How hidden states are reduced over token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over prompt positions.
    MeanInput,
    /// The final prompt position.
    LastToken,
    /// One row per prompt position.
    PerToken,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::MeanInput => "mean_input",
            Pooling::LastToken => "last_token",
            Pooling::PerToken => "per_token",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = SteerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_input" => Ok(Pooling::MeanInput),
            "last_token" => Ok(Pooling::LastToken),
            "per_token" => Ok(Pooling::PerToken),
            other => Err(SteerError::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

/// Row labels: case ids for pooled tensors, `(case id, position)` for
/// per-token tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RowIndex {
    Cases(Vec<String>),
    Tokens(Vec<(String, usize)>),
}

impl RowIndex {
    pub fn len(&self) -> usize {
        match self {
            RowIndex::Cases(v) => v.len(),
            RowIndex::Tokens(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Case id owning row `i`.
    pub fn case_id(&self, i: usize) -> &str {
        match self {
            RowIndex::Cases(v) => &v[i],
            RowIndex::Tokens(v) => &v[i].0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub layer: usize,
    pub pooling: Pooling,
    pub cols: usize,
    pub data: Vec<f32>,
    pub row_index: RowIndex,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    layer: usize,
    pooling: Pooling,
    rows: usize,
    cols: usize,
    dtype: String,
    row_index: RowIndex,
}

impl ActivationTensor {
    /// Builds a tensor and checks its invariants.
    pub fn new(layer: usize, pooling: Pooling, cols: usize, data: Vec<f32>, row_index: RowIndex) -> Result<Self> {
        let t = Self {
            layer,
            pooling,
            cols,
            data,
            row_index,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let per_token = matches!(self.row_index, RowIndex::Tokens(_));
        if per_token != (self.pooling == Pooling::PerToken) && !self.row_index.is_empty() {
            return Err(SteerError::Input(format!(
                "row index kind does not match pooling {}",
                self.pooling.as_str()
            )));
        }
        if self.data.len() != self.rows() * self.cols {
            return Err(SteerError::Input(format!(
                "{} values for {} rows of {} columns",
                self.data.len(),
                self.rows(),
                self.cols
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(SteerError::Input(format!("non-finite activation at flat index {i}")));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.row_index.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.rows(), self.cols), &self.data).expect("validated shape")
    }

    pub fn row_view(&self, i: usize) -> ArrayView1<'_, f32> {
        ArrayView1::from(self.row(i))
    }

    /// Conventional file name for a layer and pooling inside a directory.
    pub fn file_name(layer: usize, pooling: Pooling) -> String {
        format!("layer{layer:02}_{}.actv", pooling.as_str())
    }

    pub fn path_in(dir: &Path, layer: usize, pooling: Pooling) -> PathBuf {
        dir.join(Self::file_name(layer, pooling))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        binfmt::encode(MAGIC, &self.header(), &[&self.data])
    }

    fn header(&self) -> Header {
        Header {
            version: VERSION,
            layer: self.layer,
            pooling: self.pooling,
            rows: self.rows(),
            cols: self.cols,
            dtype: DTYPE.into(),
            row_index: self.row_index.clone(),
        }
    }
}

/// Writes `t` to `path`; identical tensors give identical bytes.
pub fn write_tensor(t: &ActivationTensor, path: &Path) -> Result<()> {
    t.validate()?;
    binfmt::write(path, MAGIC, &t.header(), &[&t.data])
}

pub fn read_tensor(path: &Path) -> Result<ActivationTensor> {
    let bytes = std::fs::read(path).map_err(|e| SteerError::io(path, e))?;
    decode_tensor(path, &bytes)
}

/// Parses an in-memory `ACTV0001` image; `path` is used in error messages.
pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<ActivationTensor> {
    let c = binfmt::decode::<Header>(path, bytes, MAGIC)?;
    let h = c.header;
    let bad = |m: String| SteerError::format(path, binfmt::MAGIC_LEN as u64 + 4, m);
    if h.version != VERSION {
        return Err(bad(format!("unsupported version {}", h.version)));
    }
    if h.dtype != DTYPE {
        return Err(bad(format!("unsupported dtype {:?}", h.dtype)));
    }
    if h.rows != h.row_index.len() {
        return Err(bad(format!(
            "rows = {} but row_index has {} entries",
            h.rows,
            h.row_index.len()
        )));
    }
    let expected = h
        .rows
        .checked_mul(h.cols)
        .ok_or_else(|| bad("rows × cols overflows".into()))?;
    binfmt::check_payload_len(path, c.payload_offset, c.payload.len(), expected)?;
    binfmt::check_finite(path, c.payload_offset, &c.payload)?;
    let row_index = match h.row_index {
        RowIndex::Cases(v) if v.is_empty() && h.pooling == Pooling::PerToken => RowIndex::Tokens(Vec::new()),
        other => other,
    };
    let t = ActivationTensor {
        layer: h.layer,
        pooling: h.pooling,
        cols: h.cols,
        data: c.payload,
        row_index,
    };
    t.validate().map_err(|e| bad(e.to_string()))?;
    Ok(t)
}
