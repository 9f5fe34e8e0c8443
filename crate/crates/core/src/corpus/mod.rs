// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic triage vignettes, prompt assembly, response parsing, and the
//! confusion tallies every evaluation statistic is built from.

mod generate;
mod prompt;
pub mod vocab;

pub use generate::{gen_synthetic_corpus, CorpusConfig};
pub use prompt::{
    build_prompt, parse_response, Action, PromptCondition, TriageOutcome, EMERGENCY_KEYWORDS, SAFETY_SUFFIX,
    SYSTEM_PROMPT, URGENT_KEYWORDS,
};
pub use vocab::Vocabulary;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};

/// Category string carried by every benign case.
pub const BENIGN_CATEGORY: &str = "benign";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Hazard,
    Benign,
}

impl Label {
    pub fn is_hazard(self) -> bool {
        self == Label::Hazard
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Synthetic,
    External,
}

/// One vignette with its ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub category: String,
    pub subset: Subset,
}

/// An immutable, validated collection of cases.
///
/// Ids are unique and every benign case has category `"benign"`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CaseSet {
    cases: Vec<Case>,
}

impl CaseSet {
    pub fn new(cases: Vec<Case>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(cases.len());
        for case in &cases {
            if !seen.insert(case.id.as_str()) {
                return Err(SteerError::Input(format!("duplicate case id {:?}", case.id)));
            }
            if case.label == Label::Benign && case.category != BENIGN_CATEGORY {
                return Err(SteerError::Input(format!(
                    "benign case {:?} has category {:?}",
                    case.id, case.category
                )));
            }
        }
        Ok(Self { cases })
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.cases.iter().map(|c| c.label).collect()
    }

    pub fn hazard_count(&self) -> usize {
        self.cases.iter().filter(|c| c.label.is_hazard()).count()
    }

    pub fn get(&self, id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Writes one JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SteerError::io(path, e))?;
        let mut out = BufWriter::new(file);
        for case in &self.cases {
            serde_json::to_writer(&mut out, case)?;
            out.write_all(b"\n").map_err(|e| SteerError::io(path, e))?;
        }
        out.flush().map_err(|e| SteerError::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| SteerError::io(path, e))?;
        let mut cases = Vec::new();
        let mut offset = 0u64;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| SteerError::io(path, e))?;
            if !line.trim().is_empty() {
                let case: Case = serde_json::from_str(&line)
                    .map_err(|e| SteerError::format(path, offset, format!("bad case record: {e}")))?;
                cases.push(case);
            }
            offset += line.len() as u64 + 1;
        }
        Self::new(cases)
    }
}

/// TP/FN/FP/TN tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        Self { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    /// TP/(TP+FN), or `None` without positives.
    pub fn sensitivity(&self) -> Option<f64> {
        (self.positives() > 0).then(|| self.tp as f64 / self.positives() as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        (self.negatives() > 0).then(|| self.tn as f64 / self.negatives() as f64)
    }

    pub fn record(&mut self, detected: bool, label: Label) {
        self.add(Assignment::of(detected, label));
    }

    pub fn add(&mut self, a: Assignment) {
        match a {
            Assignment::Tp => self.tp += 1,
            Assignment::Fn => self.fn_ += 1,
            Assignment::Fp => self.fp += 1,
            Assignment::Tn => self.tn += 1,
        }
    }

    pub fn from_assignments(assignments: &[Assignment]) -> Self {
        let mut c = Self::default();
        assignments.iter().for_each(|&a| c.add(a));
        c
    }
}

/// Which confusion cell a single case falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assignment {
    Tp,
    Fn,
    Fp,
    Tn,
}

impl Assignment {
    pub fn of(detected: bool, label: Label) -> Self {
        match (detected, label) {
            (true, Label::Hazard) => Assignment::Tp,
            (false, Label::Hazard) => Assignment::Fn,
            (true, Label::Benign) => Assignment::Fp,
            (false, Label::Benign) => Assignment::Tn,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Assignment::Tp => "tp",
            Assignment::Fn => "fn",
            Assignment::Fp => "fp",
            Assignment::Tn => "tn",
        }
    }
}

/// Tallies detections against ground truth.
pub fn confusion(outcomes: &[TriageOutcome], labels: &[Label]) -> Result<ConfusionCounts> {
    if outcomes.len() != labels.len() {
        return Err(SteerError::Input(format!(
            "confusion: {} outcomes but {} labels",
            outcomes.len(),
            labels.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (outcome, &label) in outcomes.iter().zip(labels) {
        counts.record(outcome.detected, label);
    }
    Ok(counts)
}
