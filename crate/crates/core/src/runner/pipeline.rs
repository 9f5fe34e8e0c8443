// SPDX-License-Identifier: MIT OR Apache-2.0

//! The end-to-end pipeline: corpus, model, baseline, probes, SAE, arms and
//! reports.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::arms::{default_conditions, run_arm, Arm, ArmInputs, ArmReport, ArmRun, Condition, ConditionCases};
use super::baseline::{run_baseline, BaselineReport, Lab};
use super::config::{derive_seed, RunConfig};
use super::par_map;
use super::report::{emit_report, ReportFormat};
use crate::activations::{write_tensor, ActivationTensor, Pooling, RowIndex};
use crate::concepts::{sparsity_report, SparsityReport};
use crate::corpus::{gen_synthetic_corpus, CaseSet, CorpusConfig, PromptCondition, Vocabulary};
use crate::error::{Result, SteerError};
use crate::nanomodel::lens::pool;
use crate::nanomodel::{
    concept_weights, hazard_token_rank, hidden_states, logit_lens, train_toy, ModelCheckpoint, TrainReport,
};
use crate::probelab::{
    cosine, critical_layer, probe_sweep_tensors, tp_fn_direction, CriticalLayer, Direction, ProbeConfig, ProbeSweep,
    Provenance,
};
use crate::sae::{
    case_feature_means, select_features, train_sae, FeatureTable, SaeCheckpoint, SaeModel, SaeTrainReport,
};
use crate::stats::auroc;

/// Best-layer probe AUROC minus baseline output sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapMetric {
    pub best_layer: usize,
    pub best_auroc: f64,
    pub sensitivity: f64,
    pub gap: f64,
}

impl GapMetric {
    pub fn new(probes: &ProbeSweep, baseline: &BaselineReport) -> Result<Self> {
        let sensitivity = baseline
            .sensitivity
            .map(|s| s.rate)
            .ok_or_else(|| SteerError::InsufficientData("no hazard cases, sensitivity undefined".into()))?;
        let best = probes.best();
        Ok(Self {
            best_layer: best.layer,
            best_auroc: best.cv_auroc,
            sensitivity,
            gap: best.cv_auroc - sensitivity,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub layer: usize,
    pub width: usize,
    pub train: SaeTrainReport,
    pub n_significant: usize,
    pub hazard_features: Vec<usize>,
    pub table_csv: String,
}

/// Everything a report is rendered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub seed: u64,
    pub config_digest: String,
    pub concept_mix: Option<f32>,
    pub train: Option<TrainReport>,
    pub baseline: BaselineReport,
    pub probes: ProbeSweep,
    pub gap: GapMetric,
    pub critical: CriticalLayer,
    pub correction: Direction,
    pub tsv: Direction,
    pub tsv_probe_cosine: f64,
    pub tsv_auroc: f64,
    pub sae: SaeSummary,
    pub sparsity: SparsityReport,
    pub arms: Vec<ArmReport>,
    pub condition_cases: Vec<ConditionCases>,
}

pub const RESULTS_FILE: &str = "results.json";

impl RunResults {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESULTS_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| SteerError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RESULTS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| SteerError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Evaluation and training case sets of a run.
pub fn corpora(cfg: &RunConfig, seed: u64) -> Result<(CaseSet, CaseSet)> {
    let eval = match &cfg.corpus_path {
        Some(p) => CaseSet::read_jsonl(p)?,
        None => gen_synthetic_corpus(&cfg.corpus, derive_seed(seed, "eval-corpus"))?,
    };
    let train_cfg = CorpusConfig {
        n_cases: cfg.train_cases,
        ..cfg.corpus.clone()
    };
    let train = gen_synthetic_corpus(&train_cfg, derive_seed(seed, "train-corpus"))?;
    Ok((eval, train))
}

/// Loads or trains the model and assembles the lab.
pub fn build_lab(cfg: &RunConfig, seed: u64) -> Result<(Lab, Option<TrainReport>, CaseSet)> {
    let (eval, train) = corpora(cfg, seed)?;
    let (model, vocab, report) = match &cfg.model_path {
        Some(p) => {
            let ck = ModelCheckpoint::load(p)?;
            (ck.params, Vocabulary::from_tokens(ck.vocab)?, None)
        }
        None => {
            let vocab = cfg.corpus.vocabulary()?;
            let (model, report) = train_toy(&train, &vocab, &cfg.train, derive_seed(seed, "model"))?;
            (model, vocab, Some(report))
        }
    };
    Ok((
        Lab {
            corpus: eval,
            vocab,
            model,
            max_new_tokens: cfg.max_new_tokens,
        },
        report,
        train,
    ))
}

/// Hidden states of every case under the standard prompt.
#[derive(Debug, Clone)]
pub struct CaseActivations {
    /// One row per case per layer, pooled for probes.
    pub pooled: Vec<ActivationTensor>,
    /// One row per case per layer, final prompt position.
    pub last: Vec<ActivationTensor>,
    /// Every prompt position at `sae_tokens.layer`.
    pub sae_tokens: ActivationTensor,
    /// Case-pooled concept weights, when the model has a concept tap.
    pub concepts: Option<Array2<f32>>,
}

struct CaseStates {
    pooled: Vec<Vec<f32>>,
    last: Vec<Vec<f32>>,
    tokens: Array2<f32>,
    concepts: Option<Vec<f32>>,
}

pub fn collect_activations(lab: &Lab, pooling: Pooling, sae_layer: usize) -> Result<CaseActivations> {
    let model = &lab.model;
    let n_layers = model.config.n_layers;
    if sae_layer >= n_layers {
        return Err(SteerError::Config(format!(
            "SAE layer {sae_layer} out of range ({n_layers} layers)"
        )));
    }
    let states = par_map(lab.corpus.cases(), |case| {
        let tokens = lab.prompt_tokens(case, PromptCondition::Standard)?;
        let hidden = hidden_states(model, &tokens)?;
        let concepts = match &model.concept {
            Some(_) => Some(pool(&concept_weights(model, &tokens)?, Pooling::MeanInput)?),
            None => None,
        };
        Ok(CaseStates {
            pooled: hidden.iter().map(|h| pool(h, pooling)).collect::<Result<_>>()?,
            last: hidden
                .iter()
                .map(|h| pool(h, Pooling::LastToken))
                .collect::<Result<_>>()?,
            tokens: hidden[sae_layer].clone(),
            concepts,
        })
    })?;
    let ids: Vec<String> = lab.corpus.cases().iter().map(|c| c.id.clone()).collect();
    let d = model.config.d_model;
    let layer_tensor = |layer: usize, pooling: Pooling, pick: &dyn Fn(&CaseStates) -> &Vec<f32>| {
        let data: Vec<f32> = states.iter().flat_map(|s| pick(s).iter().copied()).collect();
        ActivationTensor::new(layer, pooling, d, data, RowIndex::Cases(ids.clone()))
    };
    let pooled = (0..n_layers)
        .map(|l| layer_tensor(l, pooling, &|s| &s.pooled[l]))
        .collect::<Result<_>>()?;
    let last = (0..n_layers)
        .map(|l| layer_tensor(l, Pooling::LastToken, &|s| &s.last[l]))
        .collect::<Result<_>>()?;
    let mut index = Vec::new();
    let mut data = Vec::new();
    for (id, s) in ids.iter().zip(&states) {
        for (t, row) in s.tokens.rows().into_iter().enumerate() {
            index.push((id.clone(), t));
            data.extend(row.iter().copied());
        }
    }
    let sae_tokens = ActivationTensor::new(sae_layer, Pooling::PerToken, d, data, RowIndex::Tokens(index))?;
    let concepts = match model.concept.as_ref() {
        Some(tap) => {
            let k = tap.n_concepts();
            let flat: Vec<f32> = states
                .iter()
                .flat_map(|s| s.concepts.clone().unwrap_or_default())
                .collect();
            Some(Array2::from_shape_vec((states.len(), k), flat).map_err(|e| SteerError::Input(e.to_string()))?)
        }
        None => None,
    };
    Ok(CaseActivations {
        pooled,
        last,
        sae_tokens,
        concepts,
    })
}

/// Logit-lens hazard-token rank at every layer for the given rows,
/// `layer × case`.
pub fn hazard_ranks(lab: &Lab, last: &[ActivationTensor], rows: &[usize]) -> Result<Array2<f64>> {
    let ids = lab.vocab.hazard_token_ids();
    let mut out = Array2::zeros((last.len(), rows.len()));
    for (l, t) in last.iter().enumerate() {
        for (j, &row) in rows.iter().enumerate() {
            let logits = logit_lens(&lab.model, t.row(row), l)?;
            out[(l, j)] = hazard_token_rank(&logits, &ids)? as f64;
        }
    }
    Ok(out)
}

/// Critical layer and correction direction from the baseline TP and FN cases.
pub fn correction_stage(
    lab: &Lab,
    baseline: &BaselineReport,
    acts: &CaseActivations,
) -> Result<(CriticalLayer, Direction)> {
    let (fns, tps) = baseline.targets();
    let critical = critical_layer(
        hazard_ranks(lab, &acts.last, &tps)?.view(),
        hazard_ranks(lab, &acts.last, &fns)?.view(),
    )?;
    let dir = tp_fn_direction(
        acts.last[critical.layer].view(),
        &baseline.assignments(),
        critical.layer,
        Provenance::Correction,
    )?;
    Ok((critical, dir))
}

pub fn hazard_labels(baseline: &BaselineReport) -> Vec<bool> {
    baseline.outcomes.iter().map(|o| o.label.is_hazard()).collect()
}

/// Probe sweep over the pooled activations; `cfg` carries the final seed
/// (see [`RunConfig::probe_config`]).
pub fn probe_stage(acts: &CaseActivations, baseline: &BaselineReport, cfg: &ProbeConfig) -> Result<ProbeSweep> {
    probe_sweep_tensors(&acts.pooled, &hazard_labels(baseline), cfg)
}

/// TSV at `layer`, its AUROC as a hazard score and its cosine with the
/// probe weights at the same layer.
pub fn tsv_stage(
    acts: &CaseActivations,
    baseline: &BaselineReport,
    probes: &ProbeSweep,
    layer: usize,
) -> Result<(Direction, f64, f64)> {
    let (x, probe) = match (acts.pooled.get(layer), probes.results.get(layer)) {
        (Some(t), Some(p)) => (t.view(), p),
        _ => {
            return Err(SteerError::Config(format!(
                "TSV layer {layer} out of range ({} layers)",
                acts.pooled.len()
            )))
        }
    };
    let tsv = tp_fn_direction(x, &baseline.assignments(), layer, Provenance::Tsv)?;
    let scores: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&tsv.vector).map(|(&a, v)| f64::from(a) * v).sum())
        .collect();
    let a = auroc(&scores, &hazard_labels(baseline))?;
    let cos = cosine(&tsv.vector, &probe.weights)?;
    Ok((tsv, a, cos))
}

pub fn sae_stage(
    acts: &CaseActivations,
    baseline: &BaselineReport,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(SaeModel, FeatureTable, SaeTrainReport)> {
    let (sae, report) = train_sae(&acts.sae_tokens, &cfg.sae, derive_seed(seed, "sae"))?;
    let ids: Vec<String> = baseline.outcomes.iter().map(|o| o.id.clone()).collect();
    let means = case_feature_means(&sae, &acts.sae_tokens, &ids)?;
    let table = select_features(means.view(), &baseline.assignments(), cfg.sae_q)?;
    Ok((sae, table, report))
}

/// Seed of the random control of `arm` for the given offset.
pub fn control_seed(seed: u64, arm: Arm, offset: u64) -> u64 {
    derive_seed(seed, &format!("control/{}/{offset}", arm.slug()))
}

/// The configured conditions of `arm`.
pub fn arm_conditions(cfg: &RunConfig, seed: u64, arm: Arm) -> Vec<Condition> {
    let (grid, controls) = cfg.grids.for_arm(arm);
    default_conditions(
        arm,
        grid,
        controls,
        control_seed(seed, arm, cfg.control_seeds.offset(arm)),
    )
}

/// The four arms with the configured grids and matched controls.
#[allow(clippy::too_many_arguments)]
pub fn arms_stage(
    lab: &Lab,
    baseline: &BaselineReport,
    cfg: &RunConfig,
    seed: u64,
    digest: &str,
    concepts: Option<&Array2<f32>>,
    sae: (Arc<SaeModel>, usize, &FeatureTable),
    directions: (&Direction, &Direction),
) -> Result<Vec<(Arm, ArmRun)>> {
    let concepts =
        concepts.ok_or_else(|| SteerError::Config("the concept arm needs a model with a concept tap".into()))?;
    let inputs = [
        ArmInputs::Concept {
            weights: concepts.view(),
            top_k: cfg.concept_top_k,
        },
        ArmInputs::Sae {
            sae: sae.0,
            layer: sae.1,
            table: sae.2,
            top_k: cfg.sae_top_k,
        },
        ArmInputs::Direction {
            arm: Arm::Patch,
            direction: directions.0,
        },
        ArmInputs::Direction {
            arm: Arm::Tsv,
            direction: directions.1,
        },
    ];
    inputs
        .iter()
        .map(|inp| {
            let arm = inp.arm();
            let conds = arm_conditions(cfg, seed, arm);
            Ok((arm, run_arm(lab, baseline, inp, &conds, seed, digest)?))
        })
        .collect()
}

fn write_artifacts(
    dir: &Path,
    lab: &Lab,
    train: &CaseSet,
    acts: &CaseActivations,
    sae: &SaeCheckpoint,
    seed: u64,
) -> Result<()> {
    let art = dir.join("artifacts");
    std::fs::create_dir_all(art.join("activations")).map_err(|e| SteerError::io(&art, e))?;
    lab.corpus.write_jsonl(&art.join("eval_corpus.jsonl"))?;
    train.write_jsonl(&art.join("train_corpus.jsonl"))?;
    ModelCheckpoint {
        params: lab.model.clone(),
        seed,
        vocab: lab.vocab.tokens().to_vec(),
    }
    .save(&art.join("model.stlm"))?;
    sae.save(&art.join("sae.saem"))?;
    let act_dir = art.join("activations");
    for t in acts
        .pooled
        .iter()
        .chain(&acts.last)
        .chain(std::iter::once(&acts.sae_tokens))
    {
        write_tensor(t, &ActivationTensor::path_in(&act_dir, t.layer, t.pooling))?;
    }
    Ok(())
}

/// Runs every stage and writes artifacts, `results.json` and all report
/// formats into `out`. The output is a function of `cfg` and `seed` only.
pub fn run(cfg: &RunConfig, seed: u64, out: &Path) -> Result<RunResults> {
    cfg.validate()?;
    let digest = cfg.digest()?;
    std::fs::create_dir_all(out).map_err(|e| SteerError::io(out, e))?;
    let (lab, train_report, train) = build_lab(cfg, seed)?;
    let baseline = run_baseline(&lab, cfg.mcc_resamples, derive_seed(seed, "mcc-bootstrap"))?;
    let sae_layer = cfg.sae_layer(lab.model.config.n_layers);
    let acts = collect_activations(&lab, cfg.probe_pooling, sae_layer)?;
    let probes = probe_stage(&acts, &baseline, &cfg.probe_config(seed))?;
    let gap = GapMetric::new(&probes, &baseline)?;
    let (critical, correction) = correction_stage(&lab, &baseline, &acts)?;
    let (tsv, tsv_auroc, tsv_probe_cosine) = tsv_stage(&acts, &baseline, &probes, probes.best_layer)?;
    let (sae, table, sae_report) = sae_stage(&acts, &baseline, cfg, seed)?;
    let sae = Arc::new(sae);
    let runs = arms_stage(
        &lab,
        &baseline,
        cfg,
        seed,
        &digest,
        acts.concepts.as_ref(),
        (Arc::clone(&sae), sae_layer, &table),
        (&correction, &tsv),
    )?;
    let concepts = acts.concepts.as_ref().expect("concept arm ran");
    let steered: Vec<usize> = runs[0].1.steered_concepts.iter().copied().collect();
    let sparsity = sparsity_report(concepts.view(), &baseline.assignments(), &steered)?;
    let sae_ck = SaeCheckpoint {
        sae: (*sae).clone(),
        layer: sae_layer,
        seed: derive_seed(seed, "sae"),
    };
    write_artifacts(out, &lab, &train, &acts, &sae_ck, derive_seed(seed, "model"))?;
    let mut arms = Vec::new();
    let mut condition_cases = Vec::new();
    for (_, run) in runs {
        arms.extend(run.reports);
        condition_cases.extend(run.cases);
    }
    let results = RunResults {
        seed,
        config_digest: digest,
        concept_mix: lab.model.config.concept.map(|c| c.mix),
        train: train_report,
        baseline,
        probes,
        gap,
        critical,
        correction,
        tsv,
        tsv_probe_cosine,
        tsv_auroc,
        sae: SaeSummary {
            layer: sae_layer,
            width: sae.width(),
            train: sae_report,
            n_significant: table.n_significant(),
            hazard_features: table.hazard_features(),
            table_csv: table.to_csv(),
        },
        sparsity,
        arms,
        condition_cases,
    };
    std::fs::write(out.join("config.json"), cfg.canonical_json()? + "\n").map_err(|e| SteerError::io(out, e))?;
    results.save(out)?;
    emit_report(&results, out, &ReportFormat::ALL)?;
    Ok(results)
}

/// Default output directory when neither the CLI nor the config names one.
pub fn default_output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("results"))
}
