// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank statistics: Mann-Whitney U, AUROC, Benjamini-Hochberg.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Result, SteerError};

/// Largest pooled sample size for which the exact U distribution is used.
const EXACT_MAX_N: usize = 12;

/// Midranks (1-based) of `values`, plus the sizes of every tie group.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end share ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        if end - start > 1 {
            ties.push(end - start);
        }
        start = end;
    }
    (ranks, ties)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MwuMethod {
    Exact,
    Normal,
}

/// Result of a two-sided Mann-Whitney U test. `u` is the statistic of `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    pub u: f64,
    pub p: f64,
    pub method: MwuMethod,
}

/// Two-sided Mann-Whitney U test.
///
/// `U = R_x − n_x(n_x+1)/2` from midranks. The p value is exact when the
/// pooled size is at most 12 and there are no ties, otherwise it uses the
/// normal approximation with tie and continuity corrections.
pub fn mann_whitney(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    if x.is_empty() || y.is_empty() {
        return Err(SteerError::Input("mann-whitney needs two nonempty samples".into()));
    }
    let (nx, ny) = (x.len(), y.len());
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_x: f64 = ranks[..nx].iter().sum();
    let u = rank_sum_x - (nx * (nx + 1)) as f64 / 2.0;

    if nx + ny <= EXACT_MAX_N && ties.is_empty() {
        let dist = exact_u_distribution(nx, ny);
        let total: f64 = dist.iter().sum();
        let u_int = u.round() as usize;
        let lower: f64 = dist[..=u_int].iter().sum::<f64>() / total;
        let upper: f64 = dist[u_int..].iter().sum::<f64>() / total;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(MannWhitney {
            u,
            p,
            method: MwuMethod::Exact,
        });
    }

    let n = (nx + ny) as f64;
    let (nxf, nyf) = (nx as f64, ny as f64);
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let variance = nxf * nyf / 12.0 * ((n + 1.0) - tie_term);
    let p = if variance <= 0.0 {
        1.0
    } else {
        let z = ((u - nxf * nyf / 2.0).abs() - 0.5).max(0.0) / variance.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(MannWhitney {
        u,
        p,
        method: MwuMethod::Normal,
    })
}

/// Number of rank arrangements giving each value of U for sample sizes
/// `(m, n)`, via `f(u; m, n) = f(u − n; m − 1, n) + f(u; m, n − 1)`.
fn exact_u_distribution(m: usize, n: usize) -> Vec<f64> {
    // table[i][j] = distribution for sizes (i, j)
    let mut table: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n + 1]; m + 1];
    for i in 0..=m {
        for j in 0..=n {
            let len = i * j + 1;
            if i == 0 || j == 0 {
                table[i][j] = vec![1.0];
                continue;
            }
            let mut dist = vec![0.0; len];
            for (u, count) in table[i - 1][j].iter().enumerate() {
                dist[u + j] += count;
            }
            for (u, count) in table[i][j - 1].iter().enumerate() {
                dist[u] += count;
            }
            table[i][j] = dist;
        }
    }
    std::mem::take(&mut table[m][n])
}

/// Area under the ROC curve from midranks (the Mann-Whitney `U/(n₁n₀)`).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SteerError::Input(format!(
            "auroc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SteerError::InsufficientData("auroc needs both classes present".into()));
    }
    let (ranks, _) = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn check_p_values(p: &[f64]) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(SteerError::Input(format!("p value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Benjamini-Hochberg step-up procedure.
///
/// Returns the ascending indices of rejected hypotheses: every `p_i` at or
/// below `p_(k)`, where `k` is the largest rank with `p_(k) ≤ k·q/m`.
pub fn bh_fdr(p: &[f64], q: f64) -> Result<Vec<usize>> {
    check_p_values(p)?;
    let m = p.len();
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cutoff = sorted
        .iter()
        .enumerate()
        .rev()
        .find(|(i, &pv)| pv <= (i + 1) as f64 * q / m as f64)
        .map(|(_, &pv)| pv);
    Ok(match cutoff {
        Some(threshold) => (0..m).filter(|&i| p[i] <= threshold).collect(),
        None => Vec::new(),
    })
}

/// BH-adjusted p values, `min_{j ≥ i} m·p_(j)/j` capped at 1.
///
/// Hypothesis `i` is rejected by [`bh_fdr`] at level `q` exactly when its
/// adjusted value is at most `q`.
pub fn bh_adjust(p: &[f64]) -> Result<Vec<f64>> {
    check_p_values(p)?;
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &idx) in order.iter().enumerate().rev() {
        running = running.min(p[idx] * m as f64 / (rank + 1) as f64);
        adjusted[idx] = running.min(1.0);
    }
    Ok(adjusted)
}
