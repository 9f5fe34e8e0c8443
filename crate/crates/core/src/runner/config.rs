// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration, its canonical digest and derived seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arms::Arm;
use crate::activations::Pooling;
use crate::corpus::CorpusConfig;
use crate::error::{Result, SteerError};
use crate::nanomodel::{ConceptTapConfig, TrainConfig};
use crate::probelab::ProbeConfig;
use crate::rng;
use crate::sae::SaeTrainConfig;

/// Strength grids for the four arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmGrids {
    /// Weight assigned to the selected hazard concepts.
    pub concept_alphas: Vec<f32>,
    /// Weight assigned to the random control concepts.
    pub random_concept_alphas: Vec<f32>,
    pub sae_multipliers: Vec<f32>,
    pub patch_alphas: Vec<f32>,
    pub tsv_alphas: Vec<f32>,
}

impl Default for ArmGrids {
    fn default() -> Self {
        Self {
            concept_alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            random_concept_alphas: vec![0.0, 1.0],
            sae_multipliers: vec![1.0, 2.0],
            patch_alphas: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            tsv_alphas: vec![0.0, 0.5, 1.0, 2.0, 5.0, 10.0],
        }
    }
}

impl ArmGrids {
    /// Main grid and control grid of `arm`.
    pub fn for_arm(&self, arm: Arm) -> (&[f32], &[f32]) {
        match arm {
            Arm::Concept => (&self.concept_alphas, &self.random_concept_alphas),
            Arm::Sae => (&self.sae_multipliers, &self.sae_multipliers),
            Arm::Patch => (&self.patch_alphas, &self.patch_alphas),
            Arm::Tsv => (&self.tsv_alphas, &self.tsv_alphas),
        }
    }
}

/// Seed offsets for the random controls of each arm, mixed with the
/// master seed before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSeeds {
    pub concept: u64,
    pub sae: u64,
    pub patch: u64,
    pub tsv: u64,
}

impl ControlSeeds {
    pub fn offset(&self, arm: Arm) -> u64 {
        match arm {
            Arm::Concept => self.concept,
            Arm::Sae => self.sae,
            Arm::Patch => self.patch,
            Arm::Tsv => self.tsv,
        }
    }
}

impl Default for ControlSeeds {
    fn default() -> Self {
        Self {
            concept: 1,
            sae: 2,
            patch: 3,
            tsv: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Settings of the evaluation case set (and of the training set, apart
    /// from its size).
    pub corpus: CorpusConfig,
    /// Existing evaluation case set; generated from `corpus` when absent.
    #[serde(default)]
    pub corpus_path: Option<PathBuf>,
    pub train_cases: usize,
    /// Existing model checkpoint; trained from scratch when absent.
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    pub train: TrainConfig,
    pub max_new_tokens: usize,
    pub probe: ProbeConfig,
    pub probe_pooling: Pooling,
    pub sae: SaeTrainConfig,
    /// Layer the SAE reads; the middle layer when absent.
    #[serde(default)]
    pub sae_layer: Option<usize>,
    pub sae_q: f64,
    pub sae_top_k: usize,
    pub concept_top_k: usize,
    pub mcc_resamples: usize,
    pub grids: ArmGrids,
    pub control_seeds: ControlSeeds,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            corpus_path: None,
            train_cases: 400,
            model_path: None,
            train: TrainConfig::default(),
            max_new_tokens: 6,
            probe: ProbeConfig::default(),
            probe_pooling: Pooling::MeanInput,
            sae: SaeTrainConfig::default(),
            sae_layer: None,
            sae_q: 0.05,
            sae_top_k: 20,
            concept_top_k: 8,
            mcc_resamples: 1000,
            grids: ArmGrids::default(),
            control_seeds: ControlSeeds::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// A reduced configuration (120 cases, a 3-layer width-32 model) that
    /// runs end to end in seconds.
    pub fn small() -> Self {
        RunConfig {
            corpus: CorpusConfig {
                n_cases: 120,
                ..CorpusConfig::default()
            },
            train_cases: 240,
            train: TrainConfig {
                d_model: 32,
                n_layers: 3,
                n_heads: 2,
                d_mlp: 64,
                concept: Some(ConceptTapConfig {
                    n_concepts: 16,
                    layer: 1,
                    mix: 1.0,
                }),
                epochs: 12,
                ..TrainConfig::default()
            },
            probe: ProbeConfig {
                bootstrap_resamples: 200,
                ..ProbeConfig::default()
            },
            sae: SaeTrainConfig {
                width: 64,
                epochs: 2,
                batch_size: 128,
                ..SaeTrainConfig::default()
            },
            sae_top_k: 5,
            concept_top_k: 4,
            mcc_resamples: 200,
            grids: ArmGrids {
                concept_alphas: vec![0.0, 1.0],
                random_concept_alphas: vec![1.0],
                sae_multipliers: vec![2.0],
                patch_alphas: vec![0.0, 2.0],
                tsv_alphas: vec![0.0, 5.0],
            },
            ..RunConfig::default()
        }
    }
}

fn check_grid(name: &str, grid: &[f32], unit: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(SteerError::Config(format!("{name} grid is empty")));
    }
    if let Some(a) = grid
        .iter()
        .find(|a| !a.is_finite() || (unit && !(0.0..=1.0).contains(*a)) || **a < 0.0)
    {
        return Err(SteerError::Config(format!("{name} grid has invalid strength {a}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if let Some(p) = self.corpus_path.iter().chain(&self.model_path).find(|p| !p.exists()) {
            return Err(SteerError::Config(format!(
                "referenced file {} does not exist",
                p.display()
            )));
        }
        if self.train_cases == 0 || self.max_new_tokens == 0 {
            return Err(SteerError::Config(
                "train_cases and max_new_tokens must be positive".into(),
            ));
        }
        if self.probe_pooling == Pooling::PerToken {
            return Err(SteerError::Config("probes need a pooled representation".into()));
        }
        if let Some(l) = self.sae_layer {
            if l >= self.train.n_layers {
                return Err(SteerError::Config(format!(
                    "SAE layer {l} out of range ({} layers)",
                    self.train.n_layers
                )));
            }
        }
        if !(self.sae_q > 0.0 && self.sae_q < 1.0) {
            return Err(SteerError::Config(format!(
                "SAE q threshold {} outside (0, 1)",
                self.sae_q
            )));
        }
        if self.sae_top_k == 0 || self.concept_top_k == 0 || self.mcc_resamples == 0 {
            return Err(SteerError::Config(
                "sae_top_k, concept_top_k and mcc_resamples must be positive".into(),
            ));
        }
        if self.train.concept.is_none() && self.model_path.is_none() {
            return Err(SteerError::Config(
                "the concept arm needs a model with a concept tap".into(),
            ));
        }
        let g = &self.grids;
        check_grid("concept alpha", &g.concept_alphas, true)?;
        check_grid("random concept alpha", &g.random_concept_alphas, true)?;
        check_grid("SAE multiplier", &g.sae_multipliers, false)?;
        check_grid("patch alpha", &g.patch_alphas, false)?;
        check_grid("TSV alpha", &g.tsv_alphas, false)?;
        Ok(())
    }

    /// JSON with object keys in sorted order and no insignificant
    /// whitespace.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }

    /// Hex SHA-256 of [`RunConfig::canonical_json`].
    pub fn digest(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SteerError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| SteerError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&serde_json::to_value(self)?)?;
        std::fs::write(path, text + "\n").map_err(|e| SteerError::io(path, e))
    }

    pub fn sae_layer(&self, n_layers: usize) -> usize {
        self.sae_layer.unwrap_or(n_layers / 2)
    }

    /// Probe settings with the fold and bootstrap seed derived from `seed`.
    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            seed: derive_seed(seed, &format!("probe/{}", self.probe.seed)),
            ..self.probe.clone()
        }
    }
}

/// Seed for the component named `label` under `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    rng::stable_hash(&format!("{master}/{label}"))
}
