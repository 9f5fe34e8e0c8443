// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded orchestration of the baseline and the four intervention arms,
//! with CSV, Markdown and SVG reports.
//!
//! Case-level work runs in parallel and is collected in case order; every
//! random draw comes from a stream derived from the master seed and a
//! stable label, so results do not depend on the number of threads.

mod arms;
mod baseline;
mod config;
mod pipeline;
mod report;

use rayon::prelude::*;

use crate::error::Result;

pub use arms::{
    default_conditions, run_arm, Arm, ArmInputs, ArmReport, ArmRun, CaseResult, Condition, ConditionCases,
    ConditionKind, McNemarSummary,
};
pub use baseline::{run_baseline, BaselineReport, CaseOutcome, Generation, Lab, RateCi};
pub use config::{derive_seed, ArmGrids, ControlSeeds, RunConfig};
pub use pipeline::{
    arm_conditions, arms_stage, build_lab, collect_activations, control_seed, corpora, correction_stage,
    default_output_dir, hazard_labels, hazard_ranks, probe_stage, run, sae_stage, tsv_stage, CaseActivations,
    GapMetric, RunResults, SaeSummary, RESULTS_FILE,
};
pub use report::{
    condition_cases_csv, dose_response_svg, emit_report, head_to_head_csv, head_to_head_markdown, probe_auroc_svg,
    summary_markdown, ReportFormat,
};

/// Maps `f` over `items` in parallel, keeping input order; the first error
/// in input order wins.
pub(crate) fn par_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    items
        .par_iter()
        .map(f)
        .collect::<Vec<Result<U>>>()
        .into_iter()
        .collect()
}
