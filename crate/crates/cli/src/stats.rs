// SPDX-License-Identifier: MIT OR Apache-2.0

//! `steerlab stats`: the evaluation statistics on the command line, CSV in
//! and CSV out.

use std::path::{Path, PathBuf};

use clap::Subcommand;
use steerlab::corpus::ConfusionCounts;
use steerlab::stats::{
    auroc, auroc_ci, bh_adjust, bh_fdr, cohens_d, mann_whitney, mcc, mcnemar, mcnemar_exact, wilson, MwuMethod,
};
use steerlab::{Result, SteerError};

const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Subcommand)]
pub enum StatsOp {
    /// Wilson score interval for k successes out of n.
    Wilson {
        #[arg(long)]
        k: u64,
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = Z95)]
        z: f64,
    },
    /// Matthews correlation coefficient of a confusion matrix.
    Mcc {
        #[arg(long)]
        tp: u64,
        #[arg(long = "fn")]
        fn_: u64,
        #[arg(long)]
        fp: u64,
        #[arg(long)]
        tn: u64,
    },
    /// McNemar test from the two discordant counts.
    Mcnemar {
        #[arg(long)]
        b: u64,
        #[arg(long)]
        c: u64,
    },
    /// AUROC with a percentile bootstrap interval; CSV columns `score,label`.
    Auroc {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Benjamini-Hochberg adjustment; CSV column `p`.
    BhFdr {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        q: f64,
    },
    /// Two-sided Mann-Whitney U test; CSV columns `value,group`, group 1 is x.
    Mwu {
        #[arg(long)]
        input: PathBuf,
    },
    /// Cohen's d with pooled SD; CSV columns `value,group`, group 1 is x.
    CohensD {
        #[arg(long)]
        input: PathBuf,
    },
}

pub fn run(op: StatsOp) -> Result<()> {
    match op {
        StatsOp::Wilson { k, n, z } => {
            let ci = wilson(k, n, z)?;
            println!("k,n,rate,lo,hi\n{k},{n},{},{},{}", k as f64 / n as f64, ci.lo, ci.hi);
        }
        StatsOp::Mcc { tp, fn_, fp, tn } => {
            let m = mcc(&ConfusionCounts::new(tp, fn_, fp, tn));
            println!("tp,fn,fp,tn,mcc\n{tp},{fn_},{fp},{tn},{m}");
        }
        StatsOp::Mcnemar { b, c } => {
            let m = mcnemar(b, c);
            println!("b,c,chi2,p,exact_p\n{b},{c},{},{},{}", m.chi2, m.p, mcnemar_exact(b, c));
        }
        StatsOp::Auroc { input, resamples, seed } => {
            let table = read_csv(&input)?;
            let scores = table.floats("score")?;
            let labels = table.flags("label")?;
            let a = auroc(&scores, &labels)?;
            let ci = auroc_ci(&scores, &labels, resamples, seed)?;
            println!("n,auroc,lo,hi\n{},{a},{},{}", scores.len(), ci.lo, ci.hi);
        }
        StatsOp::BhFdr { input, q } => {
            let p = read_csv(&input)?.floats("p")?;
            let adjusted = bh_adjust(&p)?;
            let rejected = bh_fdr(&p, q)?;
            println!("index,p,adjusted,rejected");
            for (i, (pi, ai)) in p.iter().zip(&adjusted).enumerate() {
                println!("{i},{pi},{ai},{}", rejected.contains(&i));
            }
        }
        StatsOp::Mwu { input } => {
            let (x, y) = read_csv(&input)?.groups()?;
            let m = mann_whitney(&x, &y)?;
            let method = match m.method {
                MwuMethod::Exact => "exact",
                MwuMethod::Normal => "normal",
            };
            println!("n_x,n_y,u,p,method\n{},{},{},{},{method}", x.len(), y.len(), m.u, m.p);
        }
        StatsOp::CohensD { input } => {
            let (x, y) = read_csv(&input)?.groups()?;
            println!("n_x,n_y,d\n{},{},{}", x.len(), y.len(), cohens_d(&x, &y)?);
        }
    }
    Ok(())
}

struct Table {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<Table> {
    let fmt = |offset: u64, message: String| SteerError::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| fmt(0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| fmt(0, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| fmt(e.position().map_or(0, |p| p.byte()), e.to_string()))?;
        rows.push(record.iter().map(|f| f.trim().to_string()).collect());
    }
    Ok(Table {
        path: path.to_path_buf(),
        headers,
        rows,
    })
}

impl Table {
    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SteerError::Input(format!("{}: missing column {name:?}", self.path.display())))
    }

    fn parse<T>(&self, name: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
        let col = self.column(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let cell = row.get(col).map(String::as_str).unwrap_or("");
                f(cell).ok_or_else(|| {
                    SteerError::Input(format!(
                        "{}: row {}: invalid {name} value {cell:?}",
                        self.path.display(),
                        i + 1
                    ))
                })
            })
            .collect()
    }

    fn floats(&self, name: &str) -> Result<Vec<f64>> {
        self.parse(name, |s| s.parse().ok())
    }

    fn flags(&self, name: &str) -> Result<Vec<bool>> {
        self.parse(name, |s| match s.to_ascii_lowercase().as_str() {
            "1" | "true" | "hazard" => Some(true),
            "0" | "false" | "benign" => Some(false),
            _ => None,
        })
    }

    fn groups(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let values = self.floats("value")?;
        let groups = self.flags("group")?;
        let pick = |g: bool| {
            values
                .iter()
                .zip(&groups)
                .filter(|(_, &h)| h == g)
                .map(|(&v, _)| v)
                .collect()
        };
        Ok((pick(true), pick(false)))
    }
}
