use super::*;
use crate::rng;
use rand::Rng as _;

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Exact two-sided p by enumerating every split of the pooled values and
/// counting pairs directly.
pub(crate) fn brute_force_mwu_p(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let n = pooled.len();
    let nx = x.len();
    let pair_u = |sel: &[bool]| {
        let xs: Vec<f64> = (0..n).filter(|&i| sel[i]).map(|i| pooled[i]).collect();
        let ys: Vec<f64> = (0..n).filter(|&i| !sel[i]).map(|i| pooled[i]).collect();
        xs.iter().map(|a| ys.iter().filter(|&&b| *a > b).count()).sum::<usize>()
    };
    let observed: usize = x.iter().map(|a| y.iter().filter(|&&b| *a > b).count()).sum();
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != nx {
            continue;
        }
        let sel: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let u = pair_u(&sel);
        total += 1;
        le += (u <= observed) as u64;
        ge += (u >= observed) as u64;
    }
    (2.0 * (le.min(ge) as f64) / total as f64).min(1.0)
}

pub(crate) fn brute_force_bh(p: &[f64], q: f64) -> Vec<usize> {
    let m = p.len();
    let mut best: Option<f64> = None;
    for i in 0..m {
        // rank of p[i] among all values (1-based, ties counted as at-or-below)
        let rank = p.iter().filter(|&&v| v <= p[i]).count();
        if p[i] <= rank as f64 * q / m as f64 {
            best = Some(best.map_or(p[i], |b: f64| b.max(p[i])));
        }
    }
    match best {
        Some(t) => (0..m).filter(|&i| p[i] <= t).collect(),
        None => vec![],
    }
}

pub(crate) fn all_pairs_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

#[test]
fn wilson_matches_closed_form_reference_values() {
    // Same counts as the parser sensitivity table: 0.372-0.533 and 0.281-0.435.
    let a = wilson95(65, 144).unwrap();
    assert_eq!((round3(a.lo), round3(a.hi)), (0.372, 0.533));
    let b = wilson95(51, 144).unwrap();
    assert_eq!((round3(b.lo), round3(b.hi)), (0.281, 0.435));
    let spec = wilson95(216, 256).unwrap();
    assert_eq!((round3(spec.lo), round3(spec.hi)), (0.794, 0.883));
}

#[test]
fn wilson_is_symmetric_at_one_half() {
    let w = wilson95(5, 10).unwrap();
    assert!((w.lo + w.hi - 1.0).abs() < 1e-15);
    assert!(matches!(wilson95(0, 0), Err(SteerError::Input(_))));
    assert!(wilson95(11, 10).is_err());
    let zero = wilson95(0, 79).unwrap();
    assert_eq!(zero.lo, 0.0);
    assert_eq!(round3(zero.hi), 0.046);
}

#[test]
fn mcc_reference_values() {
    assert!((mcc(&ConfusionCounts::new(65, 79, 40, 216)) - 0.322).abs() < 5e-4);
    assert!((mcc(&ConfusionCounts::new(51, 93, 78, 178)) - 0.051).abs() < 5e-4);
    assert_eq!(mcc(&ConfusionCounts::new(10, 0, 0, 7)), 1.0);
    assert_eq!(mcc(&ConfusionCounts::new(0, 0, 3, 7)), 0.0);
}

#[test]
fn mcnemar_examples() {
    let m = mcnemar(10, 2);
    assert!((m.chi2 - 49.0 / 12.0).abs() < 1e-12);
    assert!((m.p - 0.0433).abs() < 5e-4);
    // |b - c| - 1 < 0 is clamped, so balanced discordance gives no evidence
    let eq = mcnemar(10, 10);
    assert_eq!((eq.chi2, eq.p), (0.0, 1.0));
    assert_eq!(mcnemar(0, 0).p, 1.0);
    // |b - c| <= 1 clamps the numerator to zero
    assert_eq!(mcnemar(3, 4).chi2, 0.0);
    assert_eq!(mcnemar(3, 4).p, 1.0);
}

#[test]
fn exact_mcnemar_matches_binomial_enumeration() {
    for (b, c) in [(10u64, 2u64), (0, 5), (3, 3), (7, 1), (20, 9)] {
        let n = b + c;
        let k = b.min(c);
        let mut tail = 0.0;
        let mut coef = 1.0f64;
        for i in 0..=k {
            if i > 0 {
                coef *= (n - i + 1) as f64 / i as f64;
            }
            tail += coef;
        }
        let expected = (2.0 * tail / 2f64.powi(n as i32)).min(1.0);
        assert!((mcnemar_exact(b, c) - expected).abs() < 1e-12, "b={b} c={c}");
    }
    assert_eq!(mcnemar_exact(0, 0), 1.0);
    assert!((mcnemar_exact(10, 2) - 0.0386).abs() < 1e-4);
}

#[test]
fn chi2_tail_agrees_with_statrs_distribution() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let reference = ChiSquared::new(1.0).unwrap();
    for x in [0.01, 0.5, 1.0, 3.84, 4.083, 10.0] {
        assert!((chi2_1_sf(x) - reference.sf(x)).abs() < 1e-9, "x={x}");
    }
}

#[test]
fn mann_whitney_examples() {
    let r = mann_whitney(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert_eq!(r.u, 0.0);
    assert_eq!(r.method, MwuMethod::Exact);
    assert!((r.p - 0.1).abs() < 1e-12);
    let same = mann_whitney(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(same.p >= 0.99);
    assert!(mann_whitney(&[], &[1.0]).is_err());
}

#[test]
fn exact_and_normal_mwu_agree_on_six_by_six() {
    // every attainable U for 6 vs 6 via x = the chosen ranks
    let mut worst = 0.0f64;
    for mask in 0u32..(1 << 12) {
        if mask.count_ones() != 6 {
            continue;
        }
        let x: Vec<f64> = (0..12).filter(|i| mask >> i & 1 == 1).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..12).filter(|i| mask >> i & 1 == 0).map(|i| i as f64).collect();
        let exact = mann_whitney(&x, &y).unwrap();
        // jitter a tie in far away to force the normal path without changing U
        let approx = normal_mwu_p(&x, &y);
        worst = worst.max((exact.p - approx).abs());
    }
    assert!(worst <= 0.02, "worst discrepancy {worst}");
}

fn normal_mwu_p(x: &[f64], y: &[f64]) -> f64 {
    // tie-free normal approximation with continuity correction
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let u: f64 = x.iter().map(|a| y.iter().filter(|&&b| *a > b).count() as f64).sum();
    let sigma = (nx * ny * (nx + ny + 1.0) / 12.0).sqrt();
    let z = ((u - nx * ny / 2.0).abs() - 0.5).max(0.0) / sigma;
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

#[test]
fn mann_whitney_with_ties_uses_normal_path() {
    let r = mann_whitney(&[1.0, 1.0, 2.0], &[2.0, 3.0, 3.0]).unwrap();
    assert_eq!(r.method, MwuMethod::Normal);
    assert_eq!(r.u, 0.5);
    let all_tied = mann_whitney(&[2.0; 5], &[2.0; 7]).unwrap();
    assert_eq!(all_tied.p, 1.0);
}

#[test]
fn exact_mwu_matches_enumeration_small() {
    let mut rng = rng::seeded(3);
    for _ in 0..50 {
        let nx = rng.random_range(1..=5);
        let ny = rng.random_range(1..=5);
        let mut vals: Vec<f64> = (0..nx + ny).map(|i| i as f64 + rng.random::<f64>() * 0.5).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let (x, y) = vals.split_at(nx);
        let r = mann_whitney(x, y).unwrap();
        assert!((r.p - brute_force_mwu_p(x, y)).abs() < 1e-12);
    }
}

#[test]
fn bh_examples() {
    assert_eq!(bh_fdr(&[0.01, 0.02, 0.04, 0.5], 0.05).unwrap(), vec![0, 1]);
    assert!(bh_fdr(&[1.0; 20], 0.05).unwrap().is_empty());
    assert!(bh_fdr(&[], 0.05).unwrap().is_empty());
    assert!(matches!(bh_fdr(&[0.1, 1.2], 0.05), Err(SteerError::Input(_))));
    // step-up: a large p can be rescued by its rank
    assert_eq!(bh_fdr(&[0.04, 0.04, 0.04], 0.05).unwrap(), vec![0, 1, 2]);
}

#[test]
fn bh_matches_brute_force_and_adjusted_values() {
    let mut rng = rng::seeded(9);
    for _ in 0..300 {
        let m = rng.random_range(1..=30);
        let p: Vec<f64> = (0..m)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    rng.random::<f64>() * 0.01
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let rejected = bh_fdr(&p, 0.05).unwrap();
        assert_eq!(rejected, brute_force_bh(&p, 0.05));
        let adj = bh_adjust(&p).unwrap();
        let via_adj: Vec<usize> = (0..m).filter(|&i| adj[i] <= 0.05).collect();
        assert_eq!(rejected, via_adj);
    }
}

#[test]
fn bh_rejections_grow_with_q() {
    let mut rng = rng::seeded(21);
    for _ in 0..200 {
        let m = rng.random_range(1..=40);
        let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(3)).collect();
        let a = bh_fdr(&p, 0.01).unwrap();
        let b = bh_fdr(&p, 0.05).unwrap();
        let c = bh_fdr(&p, 0.10).unwrap();
        assert!(a.iter().all(|i| b.contains(i)));
        assert!(b.iter().all(|i| c.contains(i)));
    }
}

#[test]
fn bh_controls_familywise_discoveries_under_global_null() {
    let mut any = 0;
    for seed in 0..100 {
        let mut rng = rng::seeded(1000 + seed);
        let p: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        any += (!bh_fdr(&p, 0.05).unwrap().is_empty()) as usize;
    }
    assert!(any as f64 / 100.0 <= 0.08, "{any} runs with discoveries");
}

#[test]
fn cohens_d_examples() {
    assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[3.0, 4.0, 5.0]).unwrap(), -2.0);
    assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
    let x = [1.0, 4.0, 2.5, 7.0];
    let y = [0.5, 3.0, 2.0];
    assert_eq!(cohens_d(&x, &y).unwrap(), -cohens_d(&y, &x).unwrap());
    assert!(matches!(
        cohens_d(&[2.0, 2.0], &[2.0, 2.0]),
        Err(SteerError::UndefinedEffect(_))
    ));
    assert!(matches!(
        cohens_d(&[2.0], &[2.0, 3.0]),
        Err(SteerError::InsufficientData(_))
    ));
}

#[test]
fn auroc_examples() {
    let labels = [false, false, true, true];
    assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
    assert_eq!(auroc(&[0.5; 4], &labels).unwrap(), 0.5);
    assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn auroc_matches_all_pairs_and_complements() {
    let mut rng = rng::seeded(5);
    for _ in 0..200 {
        let n = rng.random_range(2..=20);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6)) as f64).collect();
        let a = auroc(&scores, &labels).unwrap();
        assert!((a - all_pairs_auroc(&scores, &labels)).abs() < 1e-12);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn auroc_null_is_near_one_half() {
    let mut rng = rng::seeded(77);
    let scores: Vec<f64> = (0..200).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..200).map(|_| rng.random()).collect();
    let a = auroc(&scores, &labels).unwrap();
    assert!((a - 0.5).abs() <= 0.1, "{a}");
    let ci = auroc_ci(&scores, &labels, 1000, 42).unwrap();
    assert!(ci.contains(a));
    assert_eq!(ci, auroc_ci(&scores, &labels, 1000, 42).unwrap());
}

#[test]
fn bca_constant_sample_is_degenerate() {
    let r = bca_bootstrap(&[3.0; 10], |s: &[f64]| mean(s), 200, 42).unwrap();
    assert_eq!(r.method, IntervalMethod::Degenerate);
    assert_eq!(r.interval, Interval::point(3.0));
}

#[test]
fn bca_mcc_interval_contains_point_and_is_seeded() {
    // paired (detected, hazard) observations for the 65/79/40/216 table
    let mut sample = Vec::new();
    for (n, pair) in [
        (65, (true, true)),
        (79, (false, true)),
        (40, (true, false)),
        (216, (false, false)),
    ] {
        sample.extend(std::iter::repeat_n(pair, n));
    }
    let stat = |s: &[(bool, bool)]| {
        let mut c = ConfusionCounts::default();
        for &(d, h) in s {
            c.record(
                d,
                if h {
                    crate::corpus::Label::Hazard
                } else {
                    crate::corpus::Label::Benign
                },
            );
        }
        mcc(&c)
    };
    let r = bca_bootstrap(&sample, stat, 1000, 42).unwrap();
    assert_eq!(r.method, IntervalMethod::Bca);
    assert!(r.interval.contains(r.estimate), "{r:?}");
    assert!(r.interval.lo > 0.2 && r.interval.hi < 0.45, "{r:?}");
    assert_eq!(r, bca_bootstrap(&sample, stat, 1000, 42).unwrap());
}

#[test]
fn bca_mean_is_close_to_normal_theory() {
    let mut rng = rng::seeded(8);
    let x: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
    let r = bca_bootstrap(&x, |s: &[f64]| mean(s), 2000, 1).unwrap();
    let se = (sample_variance(&x) / 200.0).sqrt();
    assert!((r.interval.lo - (r.estimate - 1.96 * se)).abs() < 0.3 * se * 1.96);
    assert!((r.interval.hi - (r.estimate + 1.96 * se)).abs() < 0.3 * se * 1.96);
}

#[test]
fn quantile_interpolates() {
    let v: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    assert!((quantile(&v, 0.95) - 0.9505).abs() < 1e-12);
    assert_eq!(quantile(&[0.1; 7], 0.95), 0.1);
    assert_eq!(quantile(&[0.3], 0.95), 0.3);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn wilson_contains_point_estimate(n in 1u64..500, frac in 0.0f64..=1.0) {
            let k = ((n as f64) * frac).floor() as u64;
            let w = wilson95(k, n).unwrap();
            let p = k as f64 / n as f64;
            prop_assert!(w.lo <= p + 1e-12 && p <= w.hi + 1e-12);
            prop_assert!(0.0 <= w.lo && w.hi <= 1.0);
        }

        #[test]
        fn mcc_bounded_and_swap_invariant(tp in 0u64..200, fn_ in 0u64..200, fp in 0u64..200, tn in 0u64..200) {
            let a = mcc(&ConfusionCounts::new(tp, fn_, fp, tn));
            let b = mcc(&ConfusionCounts::new(tn, fp, fn_, tp));
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn auroc_monotone_invariant(scores in proptest::collection::vec(-5.0f64..5.0, 4..30), seed in 0u64..1000) {
            let mut rng = rng::seeded(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            let transformed: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert!((auroc(&scores, &labels).unwrap() - auroc(&transformed, &labels).unwrap()).abs() < 1e-12);
        }
    }
}
