// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SteerError>;

/// Every failure the lab can report.
///
/// Variants are grouped by the CLI exit code they map to, see
/// [`SteerError::exit_code`].
#[derive(Debug, Error)]
pub enum SteerError {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied malformed input (length mismatch, empty text, bad id).
    #[error("input error: {0}")]
    Input(String),

    /// Not enough cases of some kind to compute a statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Malformed file contents.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// A vector that must be normalized has zero length.
    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),

    /// Effect size undefined because the pooled spread is zero.
    #[error("undefined effect size: {0}")]
    UndefinedEffect(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    /// An iterative solver did not reach its tolerance.
    #[error("optimization did not converge after {iterations} iterations (gradient norm {grad_norm:e}, objective change {objective_change:e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        objective_change: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SteerError {
    /// Process exit code: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            SteerError::Config(_) => 2,
            SteerError::Input(_)
            | SteerError::InsufficientData(_)
            | SteerError::Format { .. }
            | SteerError::Io { .. }
            | SteerError::Json(_) => 3,
            SteerError::DegenerateDirection(_)
            | SteerError::UndefinedEffect(_)
            | SteerError::Divergence { .. }
            | SteerError::NonConvergence { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SteerError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        SteerError::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
