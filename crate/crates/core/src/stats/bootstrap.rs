// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bootstrap confidence intervals (BCa and percentile).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{auroc, norm_cdf, norm_ppf, quantile_sorted, Interval};
use crate::error::{Result, SteerError};
use crate::rng;

/// How a bootstrap interval was finally computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    Bca,
    /// Jackknife variance was zero, so acceleration is undefined.
    PercentileFallback,
    /// Every resample produced the same statistic.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcaInterval {
    pub estimate: f64,
    pub interval: Interval,
    pub z0: f64,
    pub acceleration: f64,
    pub method: IntervalMethod,
}

fn resample_statistics<T, F>(sample: &[T], statistic: &F, b: usize, seed: u64) -> Vec<f64>
where
    T: Clone,
    F: Fn(&[T]) -> f64,
{
    let mut rng = rng::seeded(seed);
    let n = sample.len();
    let mut buf = Vec::with_capacity(n);
    (0..b)
        .map(|_| {
            buf.clear();
            buf.extend((0..n).map(|_| sample[rng.random_range(0..n)].clone()));
            statistic(&buf)
        })
        .collect()
}

/// Bias-corrected and accelerated bootstrap interval at 95% coverage.
///
/// `z0` is the normal quantile of the fraction of resample statistics
/// strictly below the point estimate; the acceleration comes from the
/// jackknife skewness `Σd³ / (6 (Σd²)^1.5)`.
pub fn bca_bootstrap<T, F>(sample: &[T], statistic: F, b: usize, seed: u64) -> Result<BcaInterval>
where
    T: Clone,
    F: Fn(&[T]) -> f64,
{
    if sample.len() < 2 {
        return Err(SteerError::InsufficientData(
            "bca bootstrap needs at least two observations".into(),
        ));
    }
    if b == 0 {
        return Err(SteerError::Config("bca bootstrap needs at least one resample".into()));
    }
    let estimate = statistic(sample);
    let mut stats = resample_statistics(sample, &statistic, b, seed);
    stats.sort_by(f64::total_cmp);

    if stats[0] == stats[b - 1] {
        return Ok(BcaInterval {
            estimate,
            interval: Interval::point(estimate),
            z0: 0.0,
            acceleration: 0.0,
            method: IntervalMethod::Degenerate,
        });
    }

    let below = stats.iter().filter(|&&s| s < estimate).count() as f64;
    let eps = 0.5 / b as f64;
    let z0 = norm_ppf((below / b as f64).clamp(eps, 1.0 - eps));

    let n = sample.len();
    let mut holdout: Vec<T> = Vec::with_capacity(n - 1);
    let jack: Vec<f64> = (0..n)
        .map(|i| {
            holdout.clear();
            holdout.extend(sample[..i].iter().cloned());
            holdout.extend(sample[i + 1..].iter().cloned());
            statistic(&holdout)
        })
        .collect();
    let jack_mean = jack.iter().sum::<f64>() / n as f64;
    let sq: f64 = jack.iter().map(|j| (jack_mean - j).powi(2)).sum();
    let cube: f64 = jack.iter().map(|j| (jack_mean - j).powi(3)).sum();

    let (lo_q, hi_q) = (0.025, 0.975);
    if sq == 0.0 {
        return Ok(BcaInterval {
            estimate,
            interval: Interval::new(quantile_sorted(&stats, lo_q), quantile_sorted(&stats, hi_q)),
            z0,
            acceleration: 0.0,
            method: IntervalMethod::PercentileFallback,
        });
    }
    let acceleration = cube / (6.0 * sq.powf(1.5));
    let adjust = |q: f64| {
        let zq = norm_ppf(q);
        norm_cdf(z0 + (z0 + zq) / (1.0 - acceleration * (z0 + zq)))
    };
    let lo = quantile_sorted(&stats, adjust(lo_q));
    let hi = quantile_sorted(&stats, adjust(hi_q));
    Ok(BcaInterval {
        estimate,
        interval: Interval::new(lo.min(hi), lo.max(hi)),
        z0,
        acceleration,
        method: IntervalMethod::Bca,
    })
}

/// Percentile bootstrap interval at 95% coverage.
pub fn percentile_bootstrap<T, F>(sample: &[T], statistic: F, b: usize, seed: u64) -> Result<Interval>
where
    T: Clone,
    F: Fn(&[T]) -> f64,
{
    if sample.is_empty() || b == 0 {
        return Err(SteerError::InsufficientData(
            "percentile bootstrap needs data and resamples".into(),
        ));
    }
    let mut stats = resample_statistics(sample, &statistic, b, seed);
    stats.sort_by(f64::total_cmp);
    Ok(Interval::new(
        quantile_sorted(&stats, 0.025),
        quantile_sorted(&stats, 0.975),
    ))
}

/// Percentile bootstrap interval for AUROC from `b` resamples of
/// `(score, label)` pairs. Resamples that lose a class are redrawn.
pub fn auroc_ci(scores: &[f64], labels: &[bool], b: usize, seed: u64) -> Result<Interval> {
    auroc(scores, labels)?;
    if b == 0 {
        return Err(SteerError::Config("auroc_ci needs at least one resample".into()));
    }
    let mut rng = rng::seeded(seed);
    let n = scores.len();
    let mut values = Vec::with_capacity(b);
    let mut s = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    while values.len() < b {
        s.clear();
        l.clear();
        for _ in 0..n {
            let i = rng.random_range(0..n);
            s.push(scores[i]);
            l.push(labels[i]);
        }
        if let Ok(a) = auroc(&s, &l) {
            values.push(a);
        }
    }
    values.sort_by(f64::total_cmp);
    Ok(Interval::new(
        quantile_sorted(&values, 0.025),
        quantile_sorted(&values, 0.975),
    ))
}
