// SPDX-License-Identifier: MIT OR Apache-2.0

//! Implementations of the stage commands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use steerlab::activations::{write_tensor, ActivationTensor, Pooling, RowIndex};
use steerlab::corpus::{CaseSet, PromptCondition};
use steerlab::nanomodel::{extract_hidden, hidden_states, train_toy, ModelCheckpoint};
use steerlab::probelab::{probe_sweep, probe_sweep_tensors};
use steerlab::runner::{
    build_lab, collect_activations, condition_cases_csv, control_seed, corpora, correction_stage, default_conditions,
    default_output_dir, derive_seed, dose_response_svg, emit_report, head_to_head_csv, head_to_head_markdown,
    probe_stage, run, run_arm, run_baseline, sae_stage, tsv_stage, Arm, ArmInputs, ArmRun, BaselineReport,
    CaseActivations, Lab, ReportFormat, RunConfig, RunResults,
};
use steerlab::sae::{case_feature_means, select_features, train_sae, SaeCheckpoint, SaeModel, SaeTrainReport};
use steerlab::{Result, SteerError};

use crate::{ArmArgs, Command, Common};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::InitConfig { small, out } => {
            let cfg = if small {
                RunConfig::small()
            } else {
                RunConfig::default()
            };
            cfg.save(&out)
        }
        Command::GenCorpus {
            config,
            seed,
            split,
            out,
        } => gen_corpus(config.as_deref(), seed, &split, &out),
        Command::TrainModel { common, out } => train_model(&common, &out),
        Command::Baseline { common, report } => baseline(&common, &report),
        Command::Extract {
            common,
            layers,
            pooling,
            out,
        } => extract(&common, &layers, &pooling, &out),
        Command::ProbeSweep {
            common,
            acts,
            pooling,
            out,
        } => sweep(&common, acts.as_deref(), pooling.as_deref(), &out),
        Command::Tsv { common, layer, out } => tsv(&common, &layer, &out),
        Command::SaeTrain { common, layer, out } => sae_train(&common, layer, &out),
        Command::SaeSelect { common, sae, q, out } => sae_select(&common, sae.as_deref(), q, &out),
        Command::Arm1(args) => arm(Arm::Concept, &args, None),
        Command::Arm2 { arm: args, sae } => arm(Arm::Sae, &args, sae.as_deref()),
        Command::Arm3(args) => arm(Arm::Patch, &args, None),
        Command::Arm4(args) => arm(Arm::Tsv, &args, None),
        Command::Run { common, out } => run_all(&common, out),
        Command::Report { input, format, out } => report(&input, &format, out.as_deref()),
        Command::Stats { op } => crate::stats::run(op),
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let io = |source| SteerError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| SteerError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(m) = &self.model {
            cfg.model_path = Some(m.clone());
        }
        if let Some(c) = &self.cases {
            cfg.corpus_path = Some(c.clone());
        }
        Ok(cfg)
    }
}

/// Model, cases and baseline of a command.
struct Session {
    cfg: RunConfig,
    seed: u64,
    lab: Lab,
}

impl Session {
    fn open(common: &Common) -> Result<Self> {
        let cfg = common.config()?;
        let (lab, _, _) = build_lab(&cfg, common.seed)?;
        Ok(Self {
            cfg,
            seed: common.seed,
            lab,
        })
    }

    fn baseline(&self) -> Result<BaselineReport> {
        run_baseline(
            &self.lab,
            self.cfg.mcc_resamples,
            derive_seed(self.seed, "mcc-bootstrap"),
        )
    }

    fn activations(&self, sae_layer: Option<usize>) -> Result<CaseActivations> {
        let layer = sae_layer.unwrap_or_else(|| self.cfg.sae_layer(self.lab.model.config.n_layers));
        collect_activations(&self.lab, self.cfg.probe_pooling, layer)
    }

    fn labels(&self) -> Vec<bool> {
        self.lab.corpus.cases().iter().map(|c| c.label.is_hazard()).collect()
    }
}

fn gen_corpus(config: Option<&Path>, seed: u64, split: &str, out: &Path) -> Result<()> {
    let (eval, train) = corpora(&load_config(config)?, seed)?;
    let set = if split == "train" { train } else { eval };
    set.write_jsonl(out)?;
    println!("wrote {} cases to {}", set.len(), out.display());
    Ok(())
}

fn train_model(common: &Common, out: &Path) -> Result<()> {
    if common.model.is_some() {
        return Err(SteerError::Config("train-model does not take --model".into()));
    }
    let cfg = load_config(common.config.as_deref())?;
    let train = match &common.cases {
        Some(p) => CaseSet::read_jsonl(p)?,
        None => corpora(&cfg, common.seed)?.1,
    };
    let vocab = cfg.corpus.vocabulary()?;
    let seed = derive_seed(common.seed, "model");
    let (params, report) = train_toy(&train, &vocab, &cfg.train, seed)?;
    ModelCheckpoint {
        params,
        seed,
        vocab: vocab.tokens().to_vec(),
    }
    .save(out)?;
    print!("{}", to_json(&report)?);
    Ok(())
}

fn baseline(common: &Common, path: &Path) -> Result<()> {
    let s = Session::open(common)?;
    let report = s.baseline()?;
    write_file(path, &report.to_cases_csv())?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn parse_layers(spec: &str, n_layers: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..n_layers).collect());
    }
    spec.split(',')
        .map(|t| {
            let l: usize = t
                .trim()
                .parse()
                .map_err(|_| SteerError::Config(format!("invalid layer {t:?}")))?;
            if l >= n_layers {
                return Err(SteerError::Config(format!(
                    "layer {l} out of range ({n_layers} layers)"
                )));
            }
            Ok(l)
        })
        .collect()
}

fn extract(common: &Common, layers: &str, pooling: &str, out: &Path) -> Result<()> {
    let s = Session::open(common)?;
    let model = &s.lab.model;
    let layers = parse_layers(layers, model.config.n_layers)?;
    let pooling: Pooling = pooling.parse()?;
    let d = model.config.d_model;
    let mut data = vec![Vec::new(); layers.len()];
    let mut tokens_index = Vec::new();
    let mut ids = Vec::new();
    for case in s.lab.corpus.cases() {
        let tokens = s.lab.prompt_tokens(case, PromptCondition::Standard)?;
        ids.push(case.id.clone());
        if pooling == Pooling::PerToken {
            let hidden = hidden_states(model, &tokens)?;
            tokens_index.extend((0..tokens.len()).map(|t| (case.id.clone(), t)));
            for (buf, &l) in data.iter_mut().zip(&layers) {
                buf.extend(hidden[l].iter().copied());
            }
        } else {
            let pooled = extract_hidden(model, &tokens, pooling)?;
            for (buf, &l) in data.iter_mut().zip(&layers) {
                buf.extend_from_slice(&pooled[l]);
            }
        }
    }
    create_dir(out)?;
    for (buf, &l) in data.into_iter().zip(&layers) {
        let index = if pooling == Pooling::PerToken {
            RowIndex::Tokens(tokens_index.clone())
        } else {
            RowIndex::Cases(ids.clone())
        };
        let t = ActivationTensor::new(l, pooling, d, buf, index)?;
        let path = ActivationTensor::path_in(out, l, pooling);
        write_tensor(&t, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn sweep(common: &Common, acts: Option<&Path>, pooling: Option<&str>, out: &Path) -> Result<()> {
    let s = Session::open(common)?;
    let pooling: Pooling = match pooling {
        Some(p) => p.parse()?,
        None => s.cfg.probe_pooling,
    };
    let labels = s.labels();
    let cfg = s.cfg.probe_config(s.seed);
    let result = match acts {
        Some(dir) => probe_sweep(dir, s.lab.model.config.n_layers, pooling, &labels, &cfg)?,
        None => {
            let mut run_cfg = s.cfg.clone();
            run_cfg.probe_pooling = pooling;
            let session = Session { cfg: run_cfg, ..s };
            probe_sweep_tensors(&session.activations(None)?.pooled, &labels, &cfg)?
        }
    };
    write_file(out, &result.to_csv())?;
    let best = result.best();
    println!(
        "best layer {}: AUROC {:.4} [{:.4}, {:.4}]",
        best.layer, best.cv_auroc, best.auroc_ci.lo, best.auroc_ci.hi
    );
    Ok(())
}

fn tsv(common: &Common, layer: &str, out: &Path) -> Result<()> {
    let s = Session::open(common)?;
    let baseline = s.baseline()?;
    let acts = s.activations(None)?;
    let probes = probe_stage(&acts, &baseline, &s.cfg.probe_config(s.seed))?;
    let layer = match layer {
        "best" => probes.best_layer,
        l => l
            .parse()
            .map_err(|_| SteerError::Config(format!("invalid layer {l:?}, expected `best` or an index")))?,
    };
    let (dir, auroc, cos) = tsv_stage(&acts, &baseline, &probes, layer)?;
    write_file(out, &to_json(&dir)?)?;
    println!("layer {layer}: TSV AUROC {auroc:.4}, cosine with probe weights {cos:.4}");
    Ok(())
}

fn trained_sae(s: &Session, acts: &CaseActivations) -> Result<(SaeCheckpoint, SaeTrainReport)> {
    let seed = derive_seed(s.seed, "sae");
    let (sae, report) = train_sae(&acts.sae_tokens, &s.cfg.sae, seed)?;
    let ck = SaeCheckpoint {
        sae,
        layer: acts.sae_tokens.layer,
        seed,
    };
    Ok((ck, report))
}

fn sae_train(common: &Common, layer: Option<usize>, out: &Path) -> Result<()> {
    let s = Session::open(common)?;
    let (ck, report) = trained_sae(&s, &s.activations(layer)?)?;
    ck.save(out)?;
    print!("{}", to_json(&report)?);
    Ok(())
}

/// The SAE from `path`, or one trained from the configuration, with the
/// activations at its layer.
fn sae_with_acts(s: &Session, path: Option<&Path>) -> Result<(SaeCheckpoint, CaseActivations)> {
    match path {
        Some(p) => {
            let ck = SaeCheckpoint::load(p)?;
            let acts = s.activations(Some(ck.layer))?;
            Ok((ck, acts))
        }
        None => {
            let acts = s.activations(None)?;
            Ok((trained_sae(s, &acts)?.0, acts))
        }
    }
}

fn sae_select(common: &Common, sae: Option<&Path>, q: Option<f64>, out: &Path) -> Result<()> {
    let s = Session::open(common)?;
    let baseline = s.baseline()?;
    let (ck, acts) = sae_with_acts(&s, sae)?;
    let ids: Vec<String> = baseline.outcomes.iter().map(|o| o.id.clone()).collect();
    let means = case_feature_means(&ck.sae, &acts.sae_tokens, &ids)?;
    let table = select_features(means.view(), &baseline.assignments(), q.unwrap_or(s.cfg.sae_q))?;
    write_file(out, &table.to_csv())?;
    let hazard = table.hazard_features();
    println!(
        "{} of {} features significant; hazard features by p: {:?}",
        table.n_significant(),
        ck.sae.width(),
        &hazard[..hazard.len().min(s.cfg.sae_top_k)]
    );
    Ok(())
}

/// `None` for no controls, otherwise the control seed offset if given.
fn parse_control(spec: &str) -> Result<Option<Option<u64>>> {
    match spec {
        "none" => Ok(None),
        "random" => Ok(Some(None)),
        other => other
            .strip_prefix("random:")
            .and_then(|n| n.parse().ok())
            .map(|n| Some(Some(n)))
            .ok_or_else(|| {
                SteerError::Config(format!(
                    "invalid control {other:?}, expected `none`, `random` or `random:<offset>`"
                ))
            }),
    }
}

fn arm(arm: Arm, args: &ArmArgs, sae_path: Option<&Path>) -> Result<()> {
    let control = parse_control(&args.control)?;
    let s = Session::open(&args.common)?;
    let digest = s.cfg.digest()?;
    let baseline = s.baseline()?;
    let (cfg_grid, cfg_controls) = s.cfg.grids.for_arm(arm);
    let grid = args.alphas.clone().unwrap_or_else(|| cfg_grid.to_vec());
    let controls = match (control, arm) {
        (None, _) => Vec::new(),
        (Some(_), Arm::Concept) => cfg_controls.to_vec(),
        (Some(_), _) => grid.clone(),
    };
    let offset = control.flatten().unwrap_or_else(|| s.cfg.control_seeds.offset(arm));
    let conds = default_conditions(arm, &grid, &controls, control_seed(s.seed, arm, offset));
    let go = |inputs: &ArmInputs<'_>| run_arm(&s.lab, &baseline, inputs, &conds, s.seed, &digest);
    let result: ArmRun = match arm {
        Arm::Concept => {
            let acts = s.activations(None)?;
            let weights = acts
                .concepts
                .as_ref()
                .ok_or_else(|| SteerError::Config("the concept arm needs a model with a concept tap".into()))?;
            go(&ArmInputs::Concept {
                weights: weights.view(),
                top_k: s.cfg.concept_top_k,
            })?
        }
        Arm::Sae => {
            let (sae, layer, table) = match sae_path {
                Some(_) => {
                    let (ck, acts) = sae_with_acts(&s, sae_path)?;
                    let ids: Vec<String> = baseline.outcomes.iter().map(|o| o.id.clone()).collect();
                    let means = case_feature_means(&ck.sae, &acts.sae_tokens, &ids)?;
                    let table = select_features(means.view(), &baseline.assignments(), s.cfg.sae_q)?;
                    (ck.sae, ck.layer, table)
                }
                None => {
                    let acts = s.activations(None)?;
                    let (sae, table, _) = sae_stage(&acts, &baseline, &s.cfg, s.seed)?;
                    (sae, acts.sae_tokens.layer, table)
                }
            };
            let sae: Arc<SaeModel> = Arc::new(sae);
            go(&ArmInputs::Sae {
                sae,
                layer,
                table: &table,
                top_k: s.cfg.sae_top_k,
            })?
        }
        Arm::Patch => {
            let acts = s.activations(None)?;
            let (critical, direction) = correction_stage(&s.lab, &baseline, &acts)?;
            if critical.flagged {
                eprintln!("warning: no layer separates TP from FN hazard ranks");
            }
            go(&ArmInputs::Direction {
                arm,
                direction: &direction,
            })?
        }
        Arm::Tsv => {
            let acts = s.activations(None)?;
            let probes = probe_stage(&acts, &baseline, &s.cfg.probe_config(s.seed))?;
            let (direction, _, _) = tsv_stage(&acts, &baseline, &probes, probes.best_layer)?;
            go(&ArmInputs::Direction {
                arm,
                direction: &direction,
            })?
        }
    };
    let out = &args.out;
    create_dir(out)?;
    write_file(&out.join("head_to_head.csv"), &head_to_head_csv(&result.reports))?;
    let md = head_to_head_markdown(&result.reports);
    write_file(&out.join("head_to_head.md"), &md)?;
    write_file(&out.join("condition_cases.csv"), &condition_cases_csv(&result.cases))?;
    if let Some(svg) = dose_response_svg(arm, &result.reports) {
        write_file(&out.join(format!("dose_response_arm{}.svg", arm.number())), &svg)?;
    }
    print!("{md}");
    Ok(())
}

fn run_all(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let cfg = common.config()?;
    let out = out.unwrap_or_else(|| default_output_dir(&cfg));
    let res = run(&cfg, common.seed, &out)?;
    println!(
        "baseline sensitivity {:.3}, best probe AUROC {:.3} at layer {}, gap {:.3}",
        res.gap.sensitivity, res.gap.best_auroc, res.gap.best_layer, res.gap.gap
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn report(input: &Path, format: &str, out: Option<&Path>) -> Result<()> {
    let res = RunResults::load(input)?;
    let formats = ReportFormat::parse_list(format)?;
    for path in emit_report(&res, out.unwrap_or(input), &formats)? {
        println!("{}", path.display());
    }
    Ok(())
}
