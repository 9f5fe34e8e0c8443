// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV, Markdown and SVG renderings of a run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::arms::{Arm, ArmReport, ConditionCases};
use super::baseline::RateCi;
use super::pipeline::RunResults;
use crate::error::{Result, SteerError};
use crate::probelab::ProbeSweep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Svg,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Svg];

    /// Parses a comma-separated list such as `csv,svg`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let set: BTreeSet<ReportFormat> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?;
        Ok(set.into_iter().collect())
    }
}

impl FromStr for ReportFormat {
    type Err = SteerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(SteerError::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn rate_cells(r: &Option<RateCi>) -> String {
    match r {
        Some(r) => format!("{:.6},{:.6},{:.6}", r.rate, r.ci.lo, r.ci.hi),
        None => ",,".into(),
    }
}

/// One row per condition: FN correction and TP disruption rates with
/// Wilson intervals, net gain, and McNemar against the matched control.
pub fn head_to_head_csv(reports: &[ArmReport]) -> String {
    let mut out = String::from(
        "arm,condition,series,strength,is_control,fn_corrected,fn_total,fn_rate,fn_ci_lo,fn_ci_hi,\
         tp_disrupted,tp_total,tp_rate,tp_ci_lo,tp_ci_hi,net,control,mcnemar_b,mcnemar_c,mcnemar_chi2,\
         mcnemar_p,mcnemar_exact_p,seed,config_digest\n",
    );
    for r in reports {
        let m = r.mcnemar.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.arm.number(),
            r.condition,
            r.series,
            opt(r.strength),
            r.is_control,
            r.fn_corrected,
            r.fn_total,
            rate_cells(&r.fn_rate),
            r.tp_disrupted,
            r.tp_total,
            rate_cells(&r.tp_rate),
            r.net,
            opt(r.control.as_deref()),
            opt(m.map(|m| m.b)),
            opt(m.map(|m| m.c)),
            opt(m.map(|m| format!("{:.6}", m.chi2))),
            opt(m.map(|m| format!("{:.6e}", m.p))),
            opt(m.map(|m| format!("{:.6e}", m.exact_p))),
            r.seed,
            r.config_digest
        );
    }
    out
}

fn md_rate(r: &Option<RateCi>) -> String {
    match r {
        Some(r) => format!(
            "{}/{} ({:.1}% [{:.1}, {:.1}])",
            r.k,
            r.n,
            100.0 * r.rate,
            100.0 * r.ci.lo,
            100.0 * r.ci.hi
        ),
        None => "n/a".into(),
    }
}

pub fn head_to_head_markdown(reports: &[ArmReport]) -> String {
    let mut out = String::from(
        "| Arm | Condition | FN corrected (95% CI) | TP disrupted (95% CI) | Net | McNemar p vs control |\n\
         |---|---|---|---|---|---|\n",
    );
    for r in reports {
        let p = match &r.mcnemar {
            Some(m) => format!(
                "{:.4} (exact {:.4}, vs {})",
                m.p,
                m.exact_p,
                r.control.as_deref().unwrap_or_default()
            ),
            None => "".into(),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:+} | {} |",
            r.arm.number(),
            r.condition,
            md_rate(&r.fn_rate),
            md_rate(&r.tp_rate),
            r.net,
            p
        );
    }
    out.push_str(
        "\nMcNemar tests pair every baseline FN and TP case with the same case under the matched random \
         control, so the discordant counts are exact rather than bounded.\n",
    );
    out
}

pub fn condition_cases_csv(cases: &[ConditionCases]) -> String {
    let mut out = String::from("arm,condition,case_id,baseline,detected,response\n");
    for cc in cases {
        for c in &cc.cases {
            let _ = writeln!(
                out,
                "{},{},{},{},{},\"{}\"",
                cc.arm.number(),
                cc.condition,
                c.case_id,
                c.baseline.as_str(),
                c.detected,
                c.response.replace('"', "\"\"")
            );
        }
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Plot {
    svg: String,
    n_x: usize,
}

impl Plot {
    fn new(title: &str, x_label: &str, y_label: &str, x_ticks: &[String]) -> Self {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">"
        );
        let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
            W / 2.0,
            escape(title)
        );
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
        let _ = writeln!(
            svg,
            "<line class=\"axis\" x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>"
        );
        let _ = writeln!(
            svg,
            "<line class=\"axis\" x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
        );
        let mut plot = Self {
            svg,
            n_x: x_ticks.len(),
        };
        for (i, t) in x_ticks.iter().enumerate() {
            let x = plot.x(i);
            let _ = writeln!(
                plot.svg,
                "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
                y0 + 18.0,
                escape(t)
            );
        }
        for k in 0..=5 {
            let v = k as f64 / 5.0;
            let y = plot.y(v);
            let _ = writeln!(
                plot.svg,
                "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"black\"/>",
                x0 - 4.0
            );
            let _ = writeln!(
                plot.svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>",
                x0 - 8.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            plot.svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            (x0 + x1) / 2.0,
            H - 16.0,
            escape(x_label)
        );
        let _ = writeln!(
            plot.svg,
            "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{}</text>",
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        plot
    }

    fn x(&self, i: usize) -> f64 {
        let span = W - RIGHT - LEFT;
        if self.n_x <= 1 {
            LEFT + span / 2.0
        } else {
            LEFT + 20.0 + (span - 40.0) * i as f64 / (self.n_x - 1) as f64
        }
    }

    fn y(&self, v: f64) -> f64 {
        H - BOTTOM - (H - BOTTOM - TOP) * v.clamp(0.0, 1.0)
    }

    /// `points` are `(x index, value, lo, hi)`.
    fn series(&mut self, name: &str, color: &str, dashed: bool, points: &[(usize, f64, f64, f64)], legend_row: usize) {
        let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
        let coords: Vec<String> = points
            .iter()
            .map(|&(i, v, _, _)| format!("{:.1},{:.1}", self.x(i), self.y(v)))
            .collect();
        let _ = writeln!(self.svg, "<g class=\"series\" data-series=\"{}\">", escape(name));
        let _ = writeln!(
            self.svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>",
            coords.join(" ")
        );
        for &(i, v, lo, hi) in points {
            let (x, y, ylo, yhi) = (self.x(i), self.y(v), self.y(lo), self.y(hi));
            let _ = writeln!(self.svg, "<line class=\"error-bar\" x1=\"{x:.1}\" y1=\"{ylo:.1}\" x2=\"{x:.1}\" y2=\"{yhi:.1}\" stroke=\"{color}\"/>");
            for yc in [ylo, yhi] {
                let _ = writeln!(
                    self.svg,
                    "<line class=\"error-cap\" x1=\"{:.1}\" y1=\"{yc:.1}\" x2=\"{:.1}\" y2=\"{yc:.1}\" stroke=\"{color}\"/>",
                    x - 4.0,
                    x + 4.0
                );
            }
            let _ = writeln!(
                self.svg,
                "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"{color}\"/>"
            );
        }
        self.svg.push_str("</g>\n");
        self.legend(name, color, dash, legend_row);
    }

    fn legend(&mut self, name: &str, color: &str, dash: &str, row: usize) {
        let (x, y) = (W - RIGHT + 12.0, TOP + 10.0 + 18.0 * row as f64);
        let _ = writeln!(
            self.svg,
            "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>",
            x + 20.0
        );
        let _ = writeln!(
            self.svg,
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            x + 26.0,
            y + 4.0,
            escape(name)
        );
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn sorted_strengths(reports: &[&ArmReport]) -> Vec<f64> {
    let mut xs: Vec<f64> = reports.iter().filter_map(|r| r.strength).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs
}

/// FN-correction and TP-disruption rates against strength, one pair of
/// series per condition family, with Wilson error bars. `None` when the
/// arm has no dosed conditions.
pub fn dose_response_svg(arm: Arm, reports: &[ArmReport]) -> Option<String> {
    let dosed: Vec<&ArmReport> = reports
        .iter()
        .filter(|r| r.arm == arm && r.strength.is_some())
        .collect();
    if dosed.is_empty() {
        return None;
    }
    let xs = sorted_strengths(&dosed);
    let ticks: Vec<String> = xs.iter().map(|x| format!("{x}")).collect();
    let mut plot = Plot::new(
        &format!("Arm {}: {}", arm.number(), arm.title()),
        "strength",
        "rate",
        &ticks,
    );
    let mut names: Vec<&str> = Vec::new();
    for r in &dosed {
        if !names.contains(&r.series.as_str()) {
            names.push(&r.series);
        }
    }
    let mut row = 0;
    for (si, name) in names.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let members: Vec<&&ArmReport> = dosed.iter().filter(|r| r.series == *name).collect();
        let idx = |r: &ArmReport| {
            xs.iter()
                .position(|&x| Some(x) == r.strength)
                .expect("strength in axis")
        };
        for (metric, dashed) in [("FN corrected", false), ("TP disrupted", true)] {
            let mut pts: Vec<(usize, f64, f64, f64)> = members
                .iter()
                .filter_map(|r| {
                    let rate = if dashed { &r.tp_rate } else { &r.fn_rate };
                    rate.map(|c| (idx(r), c.rate, c.ci.lo, c.ci.hi))
                })
                .collect();
            pts.sort_by_key(|p| p.0);
            if pts.is_empty() {
                continue;
            }
            plot.series(&format!("{name}: {metric}"), color, dashed, &pts, row);
            row += 1;
        }
    }
    Some(plot.finish())
}

/// Cross-validated probe AUROC per layer with its bootstrap interval, and a
/// dashed horizontal line at the model's output sensitivity.
pub fn probe_auroc_svg(sweep: &ProbeSweep, sensitivity: Option<f64>) -> String {
    let ticks: Vec<String> = sweep.results.iter().map(|r| r.layer.to_string()).collect();
    let mut plot = Plot::new("Probe AUROC by layer", "layer", "AUROC / sensitivity", &ticks);
    let pts: Vec<(usize, f64, f64, f64)> = sweep
        .results
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.cv_auroc, r.auroc_ci.lo, r.auroc_ci.hi))
        .collect();
    plot.series("probe AUROC", COLORS[0], false, &pts, 0);
    if let Some(s) = sensitivity {
        let y = plot.y(s);
        let _ = writeln!(
            plot.svg,
            "<line class=\"sensitivity\" x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{}\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>",
            W - RIGHT,
            COLORS[1]
        );
        plot.legend(
            &format!("output sensitivity {s:.3}"),
            COLORS[1],
            " stroke-dasharray=\"6 4\"",
            1,
        );
    }
    plot.finish()
}

pub fn summary_markdown(res: &RunResults) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run summary\n");
    let _ = writeln!(out, "- master seed: {}", res.seed);
    let _ = writeln!(out, "- config digest: `{}`", res.config_digest);
    if let Some(mix) = res.concept_mix {
        let _ = writeln!(out, "- concept tap mixing coefficient: {mix}");
    }
    let _ = writeln!(out, "\n## Baseline\n\n{}", res.baseline.to_markdown());
    let g = &res.gap;
    let _ = writeln!(
        out,
        "## Knowledge-action gap\n\nBest probe layer {} has AUROC {:.3}; output sensitivity is {:.3}; gap {:.3}.\n",
        g.best_layer, g.best_auroc, g.sensitivity, g.gap
    );
    let _ = writeln!(
        out,
        "## Probes\n\n| Layer | C | CV accuracy | CV AUROC (95% CI) |\n|---|---|---|---|"
    );
    for r in &res.probes.results {
        let bold = if r.layer == res.probes.best_layer { "**" } else { "" };
        let _ = writeln!(
            out,
            "| {} | {} | {:.3} | {bold}{:.3}{bold} [{:.3}, {:.3}] |",
            r.layer, r.best_c, r.cv_accuracy, r.cv_auroc, r.auroc_ci.lo, r.auroc_ci.hi
        );
    }
    let c = &res.critical;
    let ds: Vec<String> =
        c.d.iter()
            .map(|d| d.map(|d| format!("{d:.3}")).unwrap_or_else(|| "undefined".into()))
            .collect();
    let _ = writeln!(
        out,
        "\n## Directions\n\n- critical layer {} (Cohen's d of FN vs TP hazard rank per layer: {}{})",
        c.layer,
        ds.join(", "),
        if c.flagged {
            "; no layer separates the groups"
        } else {
            ""
        }
    );
    let _ = writeln!(
        out,
        "- TSV at layer {}: AUROC of projections {:.3}, cosine with the probe weights {:.3}",
        res.tsv.layer, res.tsv_auroc, res.tsv_probe_cosine
    );
    let s = &res.sae;
    let _ = writeln!(
        out,
        "\n## SAE\n\n- layer {}, width {}, FVU {:.4}, mean L0 {:.2}, dead features {}\n- significant features {}, \
         hazard features {} (strongest: {:?})",
        s.layer,
        s.width,
        s.train.fvu,
        s.train.mean_l0,
        s.train.dead_features,
        s.n_significant,
        s.hazard_features.len(),
        &s.hazard_features[..s.hazard_features.len().min(10)]
    );
    let _ = writeln!(out, "\n## Concept activations\n\n{}", res.sparsity.to_markdown());
    let _ = writeln!(out, "## Head-to-head\n\n{}", head_to_head_markdown(&res.arms));
    out
}

fn write(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| SteerError::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes the requested renderings of `res` into `dir` and returns the
/// paths written. Output bytes depend only on `res`.
pub fn emit_report(res: &RunResults, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    if res.arms.is_empty() {
        return Err(SteerError::InsufficientData("no arm reports to emit".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| SteerError::io(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Csv => {
                write(dir, "head_to_head.csv", &head_to_head_csv(&res.arms), &mut written)?;
                write(dir, "baseline_cases.csv", &res.baseline.to_cases_csv(), &mut written)?;
                write(
                    dir,
                    "condition_cases.csv",
                    &condition_cases_csv(&res.condition_cases),
                    &mut written,
                )?;
                write(dir, "probe_sweep.csv", &res.probes.to_csv(), &mut written)?;
                write(dir, "sae_features.csv", &res.sae.table_csv, &mut written)?;
            }
            ReportFormat::Markdown => {
                write(dir, "summary.md", &summary_markdown(res), &mut written)?;
                write(dir, "head_to_head.md", &head_to_head_markdown(&res.arms), &mut written)?;
            }
            ReportFormat::Svg => {
                for arm in Arm::ALL {
                    if let Some(svg) = dose_response_svg(arm, &res.arms) {
                        write(
                            dir,
                            &format!("dose_response_arm{}.svg", arm.number()),
                            &svg,
                            &mut written,
                        )?;
                    }
                }
                let sens = res.baseline.sensitivity.map(|s| s.rate);
                write(
                    dir,
                    "probe_auroc.svg",
                    &probe_auroc_svg(&res.probes, sens),
                    &mut written,
                )?;
            }
        }
    }
    Ok(written)
}
