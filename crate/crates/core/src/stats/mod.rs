// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation statistics: binomial intervals, MCC, McNemar, rank tests,
//! multiple-testing control, effect sizes, AUROC and bootstrap intervals.
//!
//! Every function is pure. Seeded procedures draw from [`crate::rng`] and are
//! bit-reproducible.

mod bootstrap;
mod rank;

pub use bootstrap::{auroc_ci, bca_bootstrap, percentile_bootstrap, BcaInterval, IntervalMethod};
pub use rank::{auroc, bh_adjust, bh_fdr, mann_whitney, midranks, MannWhitney, MwuMethod};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};
use statrs::function::erf::erfc;

use crate::corpus::ConfusionCounts;
use crate::error::{Result, SteerError};

/// Two-sided 95% normal quantile used by every interval in the lab.
pub const Z95: f64 = 1.96;

/// A closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "interval bounds out of order: {lo} > {hi}");
        Self { lo, hi }
    }

    pub fn point(value: f64) -> Self {
        Self { lo: value, hi: value }
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }
}

/// Wilson score interval for `k` successes out of `n` trials.
///
/// Uses the centre `(k + z²/2)/(n + z²)` and half-width
/// `z/(n + z²) · sqrt(k(n−k)/n + z²/4)`, clamped to `[0, 1]`.
pub fn wilson(k: u64, n: u64, z: f64) -> Result<Interval> {
    if n == 0 {
        return Err(SteerError::Input("wilson interval needs n >= 1".into()));
    }
    if k > n {
        return Err(SteerError::Input(format!(
            "wilson interval needs k <= n (k={k}, n={n})"
        )));
    }
    let (k, n) = (k as f64, n as f64);
    let z2 = z * z;
    let centre = (k + z2 / 2.0) / (n + z2);
    let half = z / (n + z2) * (k * (n - k) / n + z2 / 4.0).sqrt();
    Ok(Interval::new(
        (centre - half).clamp(0.0, 1.0),
        (centre + half).clamp(0.0, 1.0),
    ))
}

/// [`wilson`] at `z = 1.96`.
pub fn wilson95(k: u64, n: u64) -> Result<Interval> {
    wilson(k, n, Z95)
}

/// Matthews correlation coefficient. Zero when any marginal total is zero.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fn_, fp, tn) = (c.tp as f64, c.fn_ as f64, c.fp as f64, c.tn as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// Continuity-corrected McNemar statistic and its χ²₁ upper-tail p value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    pub b: u64,
    pub c: u64,
    pub chi2: f64,
    pub p: f64,
}

/// McNemar's test on discordant counts `b` and `c`.
///
/// `χ² = max(|b − c| − 1, 0)² / (b + c)`; `p = erfc(sqrt(χ²/2))`.
/// With no discordant pairs the result is `(0, 1)`.
pub fn mcnemar(b: u64, c: u64) -> McNemar {
    if b + c == 0 {
        return McNemar {
            b,
            c,
            chi2: 0.0,
            p: 1.0,
        };
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let numer = diff.max(0.0).powi(2);
    let chi2 = numer / (b + c) as f64;
    McNemar {
        b,
        c,
        chi2,
        p: chi2_1_sf(chi2),
    }
}

/// Exact two-sided McNemar p value: `min(1, 2·P(X ≤ min(b, c)))` with
/// `X ~ Binomial(b + c, 1/2)`. With no discordant pairs the value is 1.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let binom = Binomial::new(0.5, n).expect("valid binomial parameters");
    (2.0 * binom.cdf(b.min(c))).min(1.0)
}

/// Upper tail of the χ² distribution with one degree of freedom.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt()).min(1.0)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with Bessel correction. Needs at least two values.
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Cohen's d with pooled, Bessel-corrected standard deviation.
pub fn cohens_d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(SteerError::InsufficientData(format!(
            "cohen's d needs at least two values per group (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let pooled = ((nx - 1.0) * sample_variance(x) + (ny - 1.0) * sample_variance(y)) / (nx + ny - 2.0);
    if !(pooled > 0.0) {
        return Err(SteerError::UndefinedEffect("pooled standard deviation is zero".into()));
    }
    Ok((mean(x) - mean(y)) / pooled.sqrt())
}

/// Quantile of an ascending-sorted slice by linear interpolation between
/// order statistics (position `q·(n−1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Quantile of an unsorted sample, see [`quantile_sorted`].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

pub(crate) fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal is valid")
}

pub(crate) fn norm_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub(crate) fn norm_ppf(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

#[cfg(test)]
mod tests;
