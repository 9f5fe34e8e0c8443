// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy baseline triage and its metrics.

use serde::{Deserialize, Serialize};

use super::par_map;
use crate::corpus::{
    build_prompt, parse_response, Assignment, Case, CaseSet, ConfusionCounts, Label, PromptCondition, Vocabulary,
};
use crate::error::{Result, SteerError};
use crate::nanomodel::{DecodeConfig, Intervention, ModelParams};
use crate::stats::{bca_bootstrap, mcc, wilson95, BcaInterval, Interval};

/// A model, its vocabulary and the case set it is evaluated on.
#[derive(Debug, Clone)]
pub struct Lab {
    pub corpus: CaseSet,
    pub vocab: Vocabulary,
    pub model: ModelParams,
    pub max_new_tokens: usize,
}

/// Response of the model to one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub response: String,
    pub detected: bool,
}

impl Lab {
    pub fn prompt_tokens(&self, case: &Case, condition: PromptCondition) -> Result<Vec<u32>> {
        self.vocab.encode_prompt(&build_prompt(case, condition)?)
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig::greedy(self.max_new_tokens, Some(self.vocab.eos_id()))
    }

    /// Greedy generation under `iv`, parsed into a triage decision.
    pub fn triage(&self, case: &Case, condition: PromptCondition, iv: &Intervention<'_>) -> Result<Generation> {
        let run = || -> Result<Generation> {
            let prompt = self.prompt_tokens(case, condition)?;
            let tokens = self.model.generate(&prompt, &self.decode_config(), iv)?;
            let response = self.vocab.decode(&tokens)?;
            let detected = parse_response(&response).detected;
            Ok(Generation {
                tokens,
                response,
                detected,
            })
        };
        run().map_err(|e| with_case(&case.id, e))
    }
}

/// Prefixes the message of `err` with the case id, keeping its kind.
pub(crate) fn with_case(id: &str, err: SteerError) -> SteerError {
    match err {
        SteerError::Config(m) => SteerError::Config(format!("case {id}: {m}")),
        SteerError::Input(m) => SteerError::Input(format!("case {id}: {m}")),
        SteerError::InsufficientData(m) => SteerError::InsufficientData(format!("case {id}: {m}")),
        SteerError::DegenerateDirection(m) => SteerError::DegenerateDirection(format!("case {id}: {m}")),
        SteerError::UndefinedEffect(m) => SteerError::UndefinedEffect(format!("case {id}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub id: String,
    pub category: String,
    pub label: Label,
    pub assignment: Assignment,
    pub generation: Generation,
}

/// A proportion `k / n` with its Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCi {
    pub k: u64,
    pub n: u64,
    pub rate: f64,
    pub ci: Interval,
}

impl RateCi {
    /// `None` when `n == 0`.
    pub fn new(k: u64, n: u64) -> Result<Option<Self>> {
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(Self {
            k,
            n,
            rate: k as f64 / n as f64,
            ci: wilson95(k, n)?,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub counts: ConfusionCounts,
    pub sensitivity: Option<RateCi>,
    pub specificity: Option<RateCi>,
    pub mcc: f64,
    pub mcc_ci: BcaInterval,
    pub outcomes: Vec<CaseOutcome>,
}

impl BaselineReport {
    /// Metrics of a list of per-case outcomes. The MCC interval is a BCa
    /// bootstrap over cases.
    pub fn from_outcomes(outcomes: Vec<CaseOutcome>, resamples: usize, seed: u64) -> Result<Self> {
        let assignments: Vec<Assignment> = outcomes.iter().map(|o| o.assignment).collect();
        let counts = ConfusionCounts::from_assignments(&assignments);
        let mcc_ci = bca_bootstrap(
            &assignments,
            |s| mcc(&ConfusionCounts::from_assignments(s)),
            resamples,
            seed,
        )?;
        Ok(Self {
            sensitivity: RateCi::new(counts.tp, counts.positives())?,
            specificity: RateCi::new(counts.tn, counts.negatives())?,
            mcc: mcc(&counts),
            counts,
            mcc_ci,
            outcomes,
        })
    }

    pub fn assignments(&self) -> Vec<Assignment> {
        self.outcomes.iter().map(|o| o.assignment).collect()
    }

    /// Rows of baseline FN cases followed by rows of baseline TP cases.
    pub fn targets(&self) -> (Vec<usize>, Vec<usize>) {
        let pick = |a| {
            self.outcomes
                .iter()
                .enumerate()
                .filter(|(_, o)| o.assignment == a)
                .map(|(i, _)| i)
                .collect()
        };
        (pick(Assignment::Fn), pick(Assignment::Tp))
    }

    pub fn to_cases_csv(&self) -> String {
        let mut out = String::from("case_id,category,label,assignment,response\n");
        for o in &self.outcomes {
            out.push_str(&format!(
                "{},{},{},{},\"{}\"\n",
                o.id,
                o.category,
                if o.label.is_hazard() { "hazard" } else { "benign" },
                o.assignment.as_str(),
                o.generation.response.replace('"', "\"\"")
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let rate = |r: &Option<RateCi>| match r {
            Some(r) => format!("{:.3} ({}/{}) [{:.3}, {:.3}]", r.rate, r.k, r.n, r.ci.lo, r.ci.hi),
            None => "n/a".to_string(),
        };
        let c = &self.counts;
        format!(
            "| Metric | Value (95% CI) |\n|---|---|\n\
             | Sensitivity | {} |\n| Specificity | {} |\n| MCC | {:.3} [{:.3}, {:.3}] |\n\
             | TP / FN / FP / TN | {} / {} / {} / {} |\n",
            rate(&self.sensitivity),
            rate(&self.specificity),
            self.mcc,
            self.mcc_ci.interval.lo,
            self.mcc_ci.interval.hi,
            c.tp,
            c.fn_,
            c.fp,
            c.tn
        )
    }
}

/// Greedy generation on every case with the standard prompt.
pub fn run_baseline(lab: &Lab, resamples: usize, seed: u64) -> Result<BaselineReport> {
    let outcomes = par_map(lab.corpus.cases(), |case| {
        let generation = lab.triage(case, PromptCondition::Standard, &Intervention::none())?;
        Ok(CaseOutcome {
            id: case.id.clone(),
            category: case.category.clone(),
            label: case.label,
            assignment: Assignment::of(generation.detected, case.label),
            generation,
        })
    })?;
    BaselineReport::from_outcomes(outcomes, resamples, seed)
}
