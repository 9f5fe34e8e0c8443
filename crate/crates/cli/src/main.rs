// SPDX-License-Identifier: MIT OR Apache-2.0

//! `steerlab`: command-line driver for the intervention lab.
//!
//! Every stage command rebuilds what it needs from `--config` and `--seed`
//! (optionally loading `--model` and `--cases` instead), so each one gives
//! the same numbers as the matching stage of `steerlab run`.

mod commands;
mod stats;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "steerlab",
    version,
    about = "Desk-scale lab for inference-time interventions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every stage command.
#[derive(Debug, Clone, Args)]
struct Common {
    /// Run configuration (JSON). Built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Model checkpoint to load instead of training one.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Evaluation cases (JSONL) to use instead of the generated corpus.
    #[arg(long)]
    cases: Option<PathBuf>,
}

/// Options shared by the four arm commands.
#[derive(Debug, Clone, Args)]
struct ArmArgs {
    #[command(flatten)]
    common: Common,
    /// Strength grid, overriding the configured one.
    #[arg(long, alias = "multiplier", alias = "multipliers", value_delimiter = ',')]
    alphas: Option<Vec<f32>>,
    /// Matched control: `random`, `random:<offset>` or `none`.
    #[arg(long, default_value = "random")]
    control: String,
    /// Directory for the arm's tables and plot.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a run configuration with the built-in defaults.
    InitConfig {
        /// Use the reduced configuration meant for quick checks.
        #[arg(long)]
        small: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic case file.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Which of the run's two case sets to write.
        #[arg(long, default_value = "eval", value_parser = ["eval", "train"])]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model and write its checkpoint.
    TrainModel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the unsteered model on every case and write the per-case table.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write residual activations in the ACTV format, one file per layer.
    Extract {
        #[command(flatten)]
        common: Common,
        /// `all` or a comma-separated list of layer indices.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value = "mean_input")]
        pooling: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a hazard probe at every layer.
    ProbeSweep {
        #[command(flatten)]
        common: Common,
        /// Read activations from this directory instead of recomputing them.
        #[arg(long)]
        acts: Option<PathBuf>,
        #[arg(long)]
        pooling: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the separator vector between TP and FN cases.
    Tsv {
        #[command(flatten)]
        common: Common,
        /// `best` (best probe layer) or a layer index.
        #[arg(long, default_value = "best")]
        layer: String,
        /// Direction as JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sparse autoencoder on per-token activations.
    SaeTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test every SAE feature for TP versus FN differences.
    SaeSelect {
        #[command(flatten)]
        common: Common,
        /// SAE checkpoint; trained from the configuration when omitted.
        #[arg(long)]
        sae: Option<PathBuf>,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concept-bottleneck steering.
    Arm1(ArmArgs),
    /// SAE feature clamping.
    Arm2 {
        #[command(flatten)]
        arm: ArmArgs,
        #[arg(long)]
        sae: Option<PathBuf>,
    },
    /// Correction-direction patching at the critical layer.
    Arm3(ArmArgs),
    /// Separator-vector steering at the best probe layer.
    Arm4(ArmArgs),
    /// Run the whole pipeline and write every artifact and report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to the configured one, then `results`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render reports from a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated list of csv, md, svg.
        #[arg(long, default_value = "csv,md,svg")]
        format: String,
        /// Destination; defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluation statistics on CSV input.
    Stats {
        #[command(subcommand)]
        op: stats::StatsOp,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
