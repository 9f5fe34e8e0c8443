// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale laboratory for inference-time mechanistic interventions.
//!
//! A small pre-norm transformer is trained on a synthetic triage language in
//! which some hazards are deliberately under-reported. The crate then probes
//! what the model knows and tries four ways of turning that knowledge into
//! corrected output:
//!
//! - [`concepts`]: overriding a concept-bottleneck tap (`steer_known`)
//! - [`sae`]: clamping sparse-autoencoder features
//! - [`probelab`] + [`nanomodel::lens`]: logit lens and correction-direction patching
//! - [`probelab`]: linear probes and separator-vector steering
//!
//! [`stats`] holds the evaluation statistics and [`runner`] wires everything
//! into a reproducible pipeline with CSV/Markdown/SVG reports.

pub mod activations;
mod binfmt;
pub mod concepts;
pub mod corpus;
pub mod error;
pub mod nanomodel;
pub mod probelab;
pub mod rng;
pub mod runner;
pub mod sae;
pub mod stats;

pub use error::{Result, SteerError};
