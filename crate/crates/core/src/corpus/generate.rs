// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded generator for synthetic vignettes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{marker_pair, Vocabulary};
use super::{Case, CaseSet, Label, Subset, BENIGN_CATEGORY};
use crate::error::{Result, SteerError};
use crate::rng;

/// Minimum vocabulary size accepted by the generator.
pub const MIN_VOCAB: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Total vocabulary size, control and response tokens included.
    pub vocab_size: usize,
    pub n_cases: usize,
    /// Fraction of hazard cases.
    pub prevalence: f64,
    /// Marker repetition counts; each hazard case draws one uniformly.
    pub salience_levels: Vec<u32>,
    pub categories: Vec<String>,
    /// Inclusive range of filler words per case.
    pub filler_min: usize,
    pub filler_max: usize,
    /// Trailing fraction of cases tagged `external`.
    #[serde(default)]
    pub external_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 96,
            n_cases: 400,
            prevalence: 0.36,
            salience_levels: vec![1, 3],
            categories: [
                "medication_reconciliation",
                "obstetric_emergency",
                "drug_interaction",
                "anaphylaxis",
                "renal_contraindication",
                "pregnancy_medication",
                "pediatric_emergency",
                "pediatric_overdose",
                "neuro_emergency",
                "metabolic_emergency",
                "cardiac_emergency",
                "suicide_risk",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            filler_min: 10,
            filler_max: 16,
            external_fraction: 0.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SteerError::Config(m));
        if self.vocab_size < MIN_VOCAB {
            return bad(format!("vocab_size must be >= {MIN_VOCAB}, got {}", self.vocab_size));
        }
        if self.n_cases == 0 {
            return bad("n_cases must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return bad(format!("prevalence must lie in [0, 1], got {}", self.prevalence));
        }
        if !(0.0..=1.0).contains(&self.external_fraction) {
            return bad(format!(
                "external_fraction must lie in [0, 1], got {}",
                self.external_fraction
            ));
        }
        if self.categories.is_empty() {
            return bad("category list is empty".into());
        }
        let mut names: Vec<&str> = self.categories.iter().map(String::as_str).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.contains(&BENIGN_CATEGORY) {
            return bad("categories must be unique and must not be \"benign\"".into());
        }
        if self.salience_levels.is_empty() || self.salience_levels.contains(&0) {
            return bad("salience_levels must be nonempty and positive".into());
        }
        if self.filler_min == 0 || self.filler_min > self.filler_max {
            return bad(format!(
                "invalid filler range {}..={}",
                self.filler_min, self.filler_max
            ));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab_size, self.categories.len())
    }

    pub fn hazard_count(&self) -> usize {
        (self.n_cases as f64 * self.prevalence).round() as usize
    }
}

/// Generates a deterministic case set.
///
/// Hazard cases carry their category's marker pair `salience` times among
/// the fillers; benign cases are fillers only.
pub fn gen_synthetic_corpus(cfg: &CorpusConfig, seed: u64) -> Result<CaseSet> {
    cfg.validate()?;
    let vocab = cfg.vocabulary()?;
    let fillers = vocab.fillers();
    let mut rng = rng::stream(seed, "corpus");

    let n_hazard = cfg.hazard_count().min(cfg.n_cases);
    let mut labels: Vec<Label> = (0..cfg.n_cases)
        .map(|i| if i < n_hazard { Label::Hazard } else { Label::Benign })
        .collect();
    labels.shuffle(&mut rng);

    let n_external = (cfg.n_cases as f64 * cfg.external_fraction).round() as usize;
    let width = cfg.n_cases.to_string().len().max(4);
    let mut hazard_seen = 0usize;
    let mut cases = Vec::with_capacity(cfg.n_cases);
    for (i, label) in labels.into_iter().enumerate() {
        let n_fill = rng.random_range(cfg.filler_min..=cfg.filler_max);
        let mut items: Vec<String> = (0..n_fill)
            .map(|_| fillers[rng.random_range(0..fillers.len())].to_string())
            .collect();
        let category = match label {
            Label::Hazard => {
                let cat = hazard_seen % cfg.categories.len();
                hazard_seen += 1;
                let salience = cfg.salience_levels[rng.random_range(0..cfg.salience_levels.len())];
                let (a, b) = marker_pair(cat);
                for _ in 0..salience {
                    let at = rng.random_range(0..=items.len());
                    items.insert(at, format!("{a} {b}"));
                }
                cfg.categories[cat].clone()
            }
            Label::Benign => BENIGN_CATEGORY.to_string(),
        };
        cases.push(Case {
            id: format!("case-{i:0width$}"),
            text: items.join(" "),
            label,
            category,
            subset: if i + n_external >= cfg.n_cases {
                Subset::External
            } else {
                Subset::Synthetic
            },
        });
    }
    CaseSet::new(cases)
}
