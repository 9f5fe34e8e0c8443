// SPDX-License-Identifier: MIT OR Apache-2.0

//! The four intervention arms and their accounting against the baseline.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::baseline::{with_case, BaselineReport, Lab, RateCi};
use super::par_map;
use crate::concepts::{
    loo_select_concepts, random_concepts, tp_targets, ConceptSelection, OverrideMap, SelectionScope, TargetMode,
};
use crate::corpus::{Assignment, PromptCondition};
use crate::error::{Result, SteerError};
use crate::nanomodel::{HookPosition, HookSpec, Intervention};
use crate::probelab::{random_direction, Direction};
use crate::rng;
use crate::sae::{build_clamp_plan, random_clamp_plan, ClampPlan, FeatureTable, SaeModel};
use crate::stats::{mcnemar, mcnemar_exact};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Concept,
    Sae,
    Patch,
    Tsv,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Concept, Arm::Sae, Arm::Patch, Arm::Tsv];

    pub fn number(self) -> u8 {
        match self {
            Arm::Concept => 1,
            Arm::Sae => 2,
            Arm::Patch => 3,
            Arm::Tsv => 4,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        Arm::ALL
            .get((n as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| SteerError::Config(format!("no arm {n}")))
    }

    /// Short lowercase name used in seed labels and file names.
    pub fn slug(self) -> &'static str {
        match self {
            Arm::Concept => "concept",
            Arm::Sae => "sae",
            Arm::Patch => "patch",
            Arm::Tsv => "tsv",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Arm::Concept => "Concept steering",
            Arm::Sae => "SAE feature clamping",
            Arm::Patch => "Logit-lens activation patching",
            Arm::Tsv => "Truthfulness separator vector",
        }
    }
}

/// What a condition does to each baseline FN and TP case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConditionKind {
    /// Selected hazard concepts forced to `alpha`.
    ConceptHazard {
        alpha: f32,
    },
    /// The same number of random, non-selected concepts forced to `alpha`.
    ConceptRandom {
        alpha: f32,
        seed: u64,
    },
    /// Selected hazard concepts forced to their TP-derived targets.
    ConceptTarget {
        mode: TargetMode,
    },
    /// Standard prompt with the safety suffix appended.
    PromptSuffix,
    /// Residual replaced by the SAE reconstruction with no feature clamped.
    SaeReconstruct,
    SaeClamp {
        multiplier: f32,
    },
    SaeRandom {
        multiplier: f32,
        seed: u64,
    },
    /// The arm's direction added with strength `alpha`.
    Direction {
        alpha: f32,
    },
    RandomDirection {
        alpha: f32,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub label: String,
    /// Series name for dose-response plots.
    pub series: String,
    /// Numeric strength, absent for conditions without a dose.
    pub strength: Option<f64>,
    pub kind: ConditionKind,
    /// Label of the matched control this condition is compared against.
    pub control: Option<String>,
}

impl Condition {
    pub fn is_control(&self) -> bool {
        matches!(
            self.kind,
            ConditionKind::ConceptRandom { .. }
                | ConditionKind::SaeRandom { .. }
                | ConditionKind::RandomDirection { .. }
        )
    }
}

fn fmt_strength(v: f32) -> String {
    format!("{v}")
}

/// The decimal value the grid entry was written as, not its binary
/// expansion (`0.1f32` becomes `0.1`).
fn strength(v: f32) -> Option<f64> {
    fmt_strength(v).parse().ok()
}

/// Default conditions of `arm` for the given grid. Every condition whose
/// strength has a random control in the grid is paired with it.
pub fn default_conditions(arm: Arm, grid: &[f32], control_grid: &[f32], control_seed: u64) -> Vec<Condition> {
    let mut out = Vec::new();
    let (main_series, ctrl_series) = match arm {
        Arm::Concept => ("hazard_concepts", "random_concepts"),
        Arm::Sae => ("hazard_features", "random_features"),
        Arm::Patch => ("correction_direction", "random_direction"),
        Arm::Tsv => ("tsv", "random_direction"),
    };
    let ctrl_label = |a: f32| format!("{ctrl_series}@{}", fmt_strength(a));
    for &a in grid {
        let kind = match arm {
            Arm::Concept => ConditionKind::ConceptHazard { alpha: a },
            Arm::Sae => ConditionKind::SaeClamp { multiplier: a },
            Arm::Patch | Arm::Tsv => ConditionKind::Direction { alpha: a },
        };
        out.push(Condition {
            label: format!("{main_series}@{}", fmt_strength(a)),
            series: main_series.into(),
            strength: strength(a),
            kind,
            control: control_grid.contains(&a).then(|| ctrl_label(a)),
        });
    }
    for &a in control_grid {
        let kind = match arm {
            Arm::Concept => ConditionKind::ConceptRandom {
                alpha: a,
                seed: control_seed,
            },
            Arm::Sae => ConditionKind::SaeRandom {
                multiplier: a,
                seed: control_seed,
            },
            Arm::Patch | Arm::Tsv => ConditionKind::RandomDirection {
                alpha: a,
                seed: control_seed,
            },
        };
        out.push(Condition {
            label: ctrl_label(a),
            series: ctrl_series.into(),
            strength: strength(a),
            kind,
            control: None,
        });
    }
    if arm == Arm::Sae {
        out.push(Condition {
            label: "reconstruction_only".into(),
            series: "reconstruction_only".into(),
            strength: None,
            kind: ConditionKind::SaeReconstruct,
            control: None,
        });
    }
    if arm == Arm::Concept {
        for (mode, name) in [(TargetMode::TpMean, "tp_mean"), (TargetMode::P95, "p95")] {
            out.push(Condition {
                label: format!("target_{name}"),
                series: format!("target_{name}"),
                strength: None,
                kind: ConditionKind::ConceptTarget { mode },
                control: None,
            });
        }
        out.push(Condition {
            label: "safety_suffix".into(),
            series: "safety_suffix".into(),
            strength: None,
            kind: ConditionKind::PromptSuffix,
            control: None,
        });
    }
    out
}

/// Everything an arm needs beyond the model and the baseline.
#[derive(Debug, Clone)]
pub enum ArmInputs<'a> {
    Concept {
        /// Case-pooled concept weights, one row per baseline case.
        weights: ArrayView2<'a, f32>,
        top_k: usize,
    },
    Sae {
        sae: Arc<SaeModel>,
        layer: usize,
        table: &'a FeatureTable,
        top_k: usize,
    },
    Direction {
        arm: Arm,
        direction: &'a Direction,
    },
}

impl ArmInputs<'_> {
    pub fn arm(&self) -> Arm {
        match self {
            ArmInputs::Concept { .. } => Arm::Concept,
            ArmInputs::Sae { .. } => Arm::Sae,
            ArmInputs::Direction { arm, .. } => *arm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarSummary {
    /// Cases correct under the condition only.
    pub b: u64,
    /// Cases correct under the control only.
    pub c: u64,
    pub chi2: f64,
    pub p: f64,
    pub exact_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub condition: String,
    pub series: String,
    pub strength: Option<f64>,
    pub is_control: bool,
    pub fn_corrected: u64,
    pub fn_total: u64,
    pub fn_rate: Option<RateCi>,
    pub tp_disrupted: u64,
    pub tp_total: u64,
    pub tp_rate: Option<RateCi>,
    pub net: i64,
    pub control: Option<String>,
    pub mcnemar: Option<McNemarSummary>,
    pub seed: u64,
    pub config_digest: String,
}

/// Outcome of one baseline FN or TP case under one condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub baseline: Assignment,
    pub detected: bool,
    pub response: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCases {
    pub arm: Arm,
    pub condition: String,
    pub cases: Vec<CaseResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub reports: Vec<ArmReport>,
    pub cases: Vec<ConditionCases>,
    /// Concepts selected for at least one case (concept arm only).
    pub steered_concepts: BTreeSet<usize>,
}

enum Prepared {
    Overrides(Vec<OverrideMap>),
    Hooks(Vec<HookSpec>),
    Suffix,
}

fn case_seed(seed: u64, case_id: &str) -> u64 {
    rng::stable_hash(&format!("{seed}/{case_id}"))
}

fn hazard_plan(table: &FeatureTable, top_k: usize, multiplier: f32) -> Result<ClampPlan> {
    let features: Vec<usize> = table.hazard_features().into_iter().take(top_k).collect();
    build_clamp_plan(table, &features, multiplier)
}

struct Context<'a, 'b> {
    lab: &'a Lab,
    baseline: &'a BaselineReport,
    inputs: &'a ArmInputs<'b>,
    targets: Vec<usize>,
    assignments: Vec<Assignment>,
    categories: Vec<String>,
    selections: Vec<ConceptSelection>,
}

impl Context<'_, '_> {
    fn prepare(&self, cond: &Condition) -> Result<Prepared> {
        let mismatch = || {
            SteerError::Config(format!(
                "condition {} does not belong to arm {:?}",
                cond.label,
                self.inputs.arm()
            ))
        };
        match (&cond.kind, self.inputs) {
            (ConditionKind::PromptSuffix, ArmInputs::Concept { .. }) => Ok(Prepared::Suffix),
            (ConditionKind::ConceptHazard { alpha }, ArmInputs::Concept { .. }) => {
                let maps = self
                    .selections
                    .iter()
                    .map(|s| OverrideMap::from_pairs(s.concepts.iter().map(|&c| (c, *alpha))))
                    .collect::<Result<_>>()?;
                Ok(Prepared::Overrides(maps))
            }
            (ConditionKind::ConceptRandom { alpha, seed }, ArmInputs::Concept { weights, .. }) => {
                let maps = self
                    .targets
                    .iter()
                    .zip(&self.selections)
                    .map(|(&row, s)| {
                        let id = &self.baseline.outcomes[row].id;
                        let exclude: BTreeSet<usize> = s.concepts.iter().copied().collect();
                        let ids = random_concepts(weights.ncols(), s.concepts.len(), &exclude, case_seed(*seed, id))
                            .map_err(|e| with_case(id, e))?;
                        OverrideMap::from_pairs(ids.into_iter().map(|c| (c, *alpha)))
                    })
                    .collect::<Result<_>>()?;
                Ok(Prepared::Overrides(maps))
            }
            (ConditionKind::ConceptTarget { mode }, ArmInputs::Concept { weights, .. }) => {
                let maps = self
                    .targets
                    .iter()
                    .zip(&self.selections)
                    .map(|(&row, s)| {
                        let go = |scope| {
                            tp_targets(
                                *weights,
                                &self.assignments,
                                &self.categories,
                                row,
                                &s.concepts,
                                *mode,
                                scope,
                            )
                        };
                        match go(s.scope) {
                            Err(SteerError::InsufficientData(_)) if s.scope == SelectionScope::Category => {
                                go(SelectionScope::Global)
                            }
                            other => other,
                        }
                        .map_err(|e| with_case(&self.baseline.outcomes[row].id, e))
                    })
                    .collect::<Result<_>>()?;
                Ok(Prepared::Overrides(maps))
            }
            (ConditionKind::SaeReconstruct, ArmInputs::Sae { sae, layer, .. }) => {
                Ok(Prepared::Hooks(vec![HookSpec::sae_substitute(
                    *layer,
                    HookPosition::AllTokens,
                    Arc::clone(sae),
                    ClampPlan::empty(),
                )]))
            }
            (
                ConditionKind::SaeClamp { multiplier },
                ArmInputs::Sae {
                    sae,
                    layer,
                    table,
                    top_k,
                },
            ) => {
                let plan = hazard_plan(table, *top_k, *multiplier)?;
                Ok(Prepared::Hooks(sae_hooks(sae, *layer, plan)))
            }
            (
                ConditionKind::SaeRandom { multiplier, seed },
                ArmInputs::Sae {
                    sae,
                    layer,
                    table,
                    top_k,
                },
            ) => {
                let k = hazard_plan(table, *top_k, *multiplier)?.targets().len();
                let plan = random_clamp_plan(table, k, *multiplier, *seed)?;
                Ok(Prepared::Hooks(sae_hooks(sae, *layer, plan)))
            }
            (ConditionKind::Direction { alpha }, ArmInputs::Direction { direction, .. }) => {
                Ok(Prepared::Hooks(vec![HookSpec::add_direction(
                    direction.layer,
                    direction.to_f32(),
                    *alpha,
                )]))
            }
            (ConditionKind::RandomDirection { alpha, seed }, ArmInputs::Direction { direction, .. }) => {
                let r = random_direction(direction.layer, direction.d_model(), *seed)?;
                Ok(Prepared::Hooks(vec![HookSpec::add_direction(
                    r.layer,
                    r.to_f32(),
                    *alpha,
                )]))
            }
            _ => Err(mismatch()),
        }
    }

    fn evaluate(&self, cond: &Condition) -> Result<Vec<CaseResult>> {
        let prepared = self.prepare(cond)?;
        let slots: Vec<usize> = (0..self.targets.len()).collect();
        par_map(&slots, |&slot| {
            let row = self.targets[slot];
            let case = &self.lab.corpus.cases()[row];
            let generation = match &prepared {
                Prepared::Suffix => self
                    .lab
                    .triage(case, PromptCondition::SafetySuffix, &Intervention::none())?,
                Prepared::Hooks(h) => self
                    .lab
                    .triage(case, PromptCondition::Standard, &Intervention::hooks(h))?,
                Prepared::Overrides(maps) => {
                    self.lab
                        .triage(case, PromptCondition::Standard, &Intervention::overrides(&maps[slot]))?
                }
            };
            Ok(CaseResult {
                case_id: case.id.clone(),
                baseline: self.baseline.outcomes[row].assignment,
                detected: generation.detected,
                response: generation.response,
                tokens: generation.tokens,
            })
        })
    }
}

/// An empty plan installs no hook, so the condition reproduces the baseline.
fn sae_hooks(sae: &Arc<SaeModel>, layer: usize, plan: ClampPlan) -> Vec<HookSpec> {
    if plan.is_empty() {
        Vec::new()
    } else {
        vec![HookSpec::sae_substitute(
            layer,
            HookPosition::AllTokens,
            Arc::clone(sae),
            plan,
        )]
    }
}

fn tally(cases: &[CaseResult]) -> (u64, u64, u64, u64) {
    let mut out = (0, 0, 0, 0);
    for c in cases {
        match c.baseline {
            Assignment::Fn => {
                out.1 += 1;
                out.0 += u64::from(c.detected);
            }
            Assignment::Tp => {
                out.3 += 1;
                out.2 += u64::from(!c.detected);
            }
            _ => {}
        }
    }
    out
}

/// Paired comparison on every baseline FN and TP case: a case counts as
/// correct when the hazard is detected.
fn compare(cond: &[CaseResult], ctrl: &[CaseResult]) -> McNemarSummary {
    let (mut b, mut c) = (0, 0);
    for (x, y) in cond.iter().zip(ctrl) {
        debug_assert_eq!(x.case_id, y.case_id);
        match (x.detected, y.detected) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    let m = mcnemar(b, c);
    McNemarSummary {
        b,
        c,
        chi2: m.chi2,
        p: m.p,
        exact_p: mcnemar_exact(b, c),
    }
}

/// Re-generates every baseline FN and TP case under each condition and
/// tallies corrected FNs and disrupted TPs.
pub fn run_arm(
    lab: &Lab,
    baseline: &BaselineReport,
    inputs: &ArmInputs<'_>,
    conditions: &[Condition],
    seed: u64,
    config_digest: &str,
) -> Result<ArmRun> {
    if conditions.is_empty() {
        return Err(SteerError::Config("arm has no conditions".into()));
    }
    let labels: BTreeSet<&str> = conditions.iter().map(|c| c.label.as_str()).collect();
    if labels.len() != conditions.len() {
        return Err(SteerError::Config("condition labels are not unique".into()));
    }
    if let Some(c) = conditions
        .iter()
        .find(|c| c.control.as_deref().is_some_and(|l| !labels.contains(l)))
    {
        return Err(SteerError::Config(format!(
            "condition {} requests a comparison with missing control {}",
            c.label,
            c.control.as_deref().unwrap_or_default()
        )));
    }
    if baseline.outcomes.len() != lab.corpus.len() {
        return Err(SteerError::Input(format!(
            "baseline has {} cases, the case set {}",
            baseline.outcomes.len(),
            lab.corpus.len()
        )));
    }
    let (fns, tps) = baseline.targets();
    let targets: Vec<usize> = fns.into_iter().chain(tps).collect();
    let assignments = baseline.assignments();
    let categories: Vec<String> = baseline.outcomes.iter().map(|o| o.category.clone()).collect();
    let selections = match inputs {
        ArmInputs::Concept { weights, top_k } => {
            if weights.nrows() != baseline.outcomes.len() {
                return Err(SteerError::Input(format!(
                    "{} concept rows for {} cases",
                    weights.nrows(),
                    baseline.outcomes.len()
                )));
            }
            par_map(&targets, |&row| {
                loo_select_concepts(*weights, &assignments, &categories, row, *top_k)
                    .map_err(|e| with_case(&baseline.outcomes[row].id, e))
            })?
        }
        _ => Vec::new(),
    };
    let steered_concepts = selections.iter().flat_map(|s| s.concepts.iter().copied()).collect();
    let ctx = Context {
        lab,
        baseline,
        inputs,
        targets,
        assignments,
        categories,
        selections,
    };
    let mut cases = Vec::with_capacity(conditions.len());
    for cond in conditions {
        cases.push(ctx.evaluate(cond)?);
    }
    let mut reports = Vec::with_capacity(conditions.len());
    for (cond, results) in conditions.iter().zip(&cases) {
        let (fixed, fn_total, broken, tp_total) = tally(results);
        let mcnemar = cond.control.as_deref().map(|label| {
            let idx = conditions
                .iter()
                .position(|c| c.label == label)
                .expect("control presence checked");
            compare(results, &cases[idx])
        });
        reports.push(ArmReport {
            arm: inputs.arm(),
            condition: cond.label.clone(),
            series: cond.series.clone(),
            strength: cond.strength,
            is_control: cond.is_control(),
            fn_corrected: fixed,
            fn_total,
            fn_rate: RateCi::new(fixed, fn_total)?,
            tp_disrupted: broken,
            tp_total,
            tp_rate: RateCi::new(broken, tp_total)?,
            net: fixed as i64 - broken as i64,
            control: cond.control.clone(),
            mcnemar,
            seed,
            config_digest: config_digest.to_string(),
        });
    }
    let cases = conditions
        .iter()
        .zip(cases)
        .map(|(c, cases)| ConditionCases {
            arm: inputs.arm(),
            condition: c.label.clone(),
            cases,
        })
        .collect();
    Ok(ArmRun {
        reports,
        cases,
        steered_concepts,
    })
}
