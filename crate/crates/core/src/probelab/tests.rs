use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::activations::{write_tensor, ActivationTensor, Pooling, RowIndex};
use crate::stats::auroc;

fn clusters(n: usize, d: usize, sep: f32, seed: u64) -> (Array2<f32>, Vec<bool>) {
    let mut r = rng::seeded(seed);
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let x = Array2::from_shape_fn((n, d), |(i, j)| {
        let z: f32 = StandardNormal.sample(&mut r);
        if j == 0 && labels[i] {
            z + sep
        } else {
            z
        }
    });
    (x, labels)
}

fn tensor(layer: usize, x: &Array2<f32>) -> ActivationTensor {
    let ids = RowIndex::Cases((0..x.nrows()).map(|i| format!("case-{i:03}")).collect());
    ActivationTensor::new(layer, Pooling::MeanInput, x.ncols(), x.iter().copied().collect(), ids).unwrap()
}

fn fast_cfg() -> ProbeConfig {
    ProbeConfig {
        bootstrap_resamples: 200,
        ..ProbeConfig::default()
    }
}

fn brute_objective(x: &Array2<f64>, y: &[bool], w: &[f64], b: f64, c: f64) -> f64 {
    let mut total = 0.0;
    for (row, &l) in x.rows().into_iter().zip(y) {
        let z: f64 = row.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() + b;
        let p = 1.0 / (1.0 + (-z).exp());
        total -= if l { p.ln() } else { (1.0 - p).ln() };
    }
    total + w.iter().map(|v| v * v).sum::<f64>() / (2.0 * c)
}

#[test]
fn logistic_fit_is_a_stationary_point() {
    let (x, y) = clusters(80, 3, 1.0, 1);
    let xf = x.mapv(f64::from);
    let fit = fit_logistic(&xf.view(), &y, 1.0, 1e-10).unwrap();
    let base = brute_objective(&xf, &y, &fit.weights, fit.bias, 1.0);
    assert!((base - fit.objective).abs() < 1e-9);
    for j in 0..4 {
        for h in [1e-3, -1e-3] {
            let mut w = fit.weights.clone();
            let mut b = fit.bias;
            if j < 3 {
                w[j] += h;
            } else {
                b += h;
            }
            assert!(brute_objective(&xf, &y, &w, b, 1.0) >= base - 1e-12);
        }
    }
}

#[test]
fn logistic_reports_bad_inputs() {
    let x = Array2::<f64>::zeros((4, 2));
    assert!(fit_logistic(&x.view(), &[true, false], 1.0, 1e-6).is_err());
    assert!(matches!(
        fit_logistic(&x.view(), &[true, false, true, false], 0.0, 1e-6),
        Err(SteerError::Config(_))
    ));
}

#[test]
fn separable_clusters_are_perfectly_probed() {
    let (x, y) = clusters(200, 8, 6.0, 2);
    let res = train_probe(&tensor(0, &x), &y, &fast_cfg()).unwrap();
    assert!(res.cv_auroc >= 0.99, "{}", res.cv_auroc);
    assert!(res.cv_accuracy >= 0.95);
    assert!(res.auroc_ci.lo <= res.cv_auroc && res.cv_auroc <= res.auroc_ci.hi);
    assert!(ProbeConfig::default().c_grid.contains(&res.best_c));
    assert_eq!(res.grid.len(), 4);
}

#[test]
fn shuffled_labels_give_chance_auroc() {
    let (x, mut y) = clusters(200, 8, 6.0, 3);
    y.shuffle(&mut rng::stream(3, "shuffle-labels"));
    let res = train_probe(&tensor(0, &x), &y, &fast_cfg()).unwrap();
    assert!((0.4..=0.6).contains(&res.cv_auroc), "{}", res.cv_auroc);
}

#[test]
fn duplicating_cases_matches_half_c() {
    let (x, y) = clusters(60, 4, 1.5, 4);
    let xf = x.mapv(f64::from);
    let a = fit_logistic(&xf.view(), &y, 1.0, 1e-10).unwrap();
    let doubled = ndarray::concatenate(Axis(0), &[xf.view(), xf.view()]).unwrap();
    let yy: Vec<bool> = y.iter().chain(&y).copied().collect();
    let b = fit_logistic(&doubled.view(), &yy, 0.5, 1e-10).unwrap();
    assert!(cosine(&a.weights, &b.weights).unwrap() > 1.0 - 1e-4);
    assert!((a.bias - b.bias).abs() < 1e-4);
}

#[test]
fn folds_are_stratified() {
    for (n_pos, n_neg) in [(10, 10), (13, 27), (5, 96), (7, 8)] {
        let labels: Vec<bool> = (0..n_pos + n_neg).map(|i| i < n_pos).collect();
        let folds = stratified_folds(&labels, 5, 11).unwrap();
        for f in 0..5 {
            let pos = labels.iter().zip(&folds).filter(|(&l, &k)| l && k == f).count() as f64;
            let neg = labels.iter().zip(&folds).filter(|(&l, &k)| !l && k == f).count() as f64;
            assert!((pos - n_pos as f64 / 5.0).abs() <= 1.0);
            assert!((neg - n_neg as f64 / 5.0).abs() <= 1.0);
        }
    }
}

#[test]
fn too_few_cases_per_class() {
    let (x, _) = clusters(20, 2, 1.0, 5);
    let y: Vec<bool> = (0..20).map(|i| i < 4).collect();
    assert!(matches!(
        train_probe(&tensor(0, &x), &y, &fast_cfg()),
        Err(SteerError::InsufficientData(_))
    ));
}

#[test]
fn per_token_tensors_are_rejected() {
    let idx = RowIndex::Tokens((0..10).map(|i| ("a".to_string(), i)).collect());
    let t = ActivationTensor::new(0, Pooling::PerToken, 1, vec![0.0; 10], idx).unwrap();
    assert!(train_probe(&t, &[true; 10], &fast_cfg()).is_err());
}

#[test]
fn sweep_ties_go_to_layer_zero() {
    let (x, y) = clusters(60, 3, 2.0, 6);
    let tensors: Vec<_> = (0..3).map(|l| tensor(l, &x)).collect();
    let sweep = probe_sweep_tensors(&tensors, &y, &fast_cfg()).unwrap();
    assert!(sweep.results.iter().all(|r| r.cv_auroc == sweep.results[0].cv_auroc));
    assert_eq!(sweep.best_layer, 0);
    assert_eq!(sweep.to_csv().lines().count(), 4);
}

#[test]
fn sweep_finds_the_layer_carrying_signal() {
    let dir = tempfile::tempdir().unwrap();
    let y: Vec<bool> = (0..80).map(|i| i % 2 == 0).collect();
    for l in 0..5 {
        let (x, _) = clusters(80, 4, if l == 3 { 3.0 } else { 0.0 }, 20 + l as u64);
        let t = tensor(l, &x);
        write_tensor(&t, &ActivationTensor::path_in(dir.path(), l, Pooling::MeanInput)).unwrap();
    }
    let sweep = probe_sweep(dir.path(), 5, Pooling::MeanInput, &y, &fast_cfg()).unwrap();
    assert_eq!(sweep.best_layer, 3);
    assert_eq!(sweep.best().layer, 3);
    let err = probe_sweep(dir.path(), 6, Pooling::MeanInput, &y, &fast_cfg()).unwrap_err();
    assert!(err.to_string().contains("layer 5"), "{err}");
}

#[test]
fn decision_scores_rank_like_probabilities() {
    let (x, y) = clusters(100, 3, 1.0, 7);
    let res = train_probe(&tensor(0, &x), &y, &fast_cfg()).unwrap();
    let scores: Vec<f64> = x.rows().into_iter().map(|r| res.score(r.as_slice().unwrap())).collect();
    let probs: Vec<f64> = scores.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
    let cubed: Vec<f64> = scores.iter().map(|z| z.powi(3)).collect();
    let a = auroc(&scores, &y).unwrap();
    assert_eq!(a, auroc(&probs, &y).unwrap());
    assert_eq!(a, auroc(&cubed, &y).unwrap());
}

#[test]
fn make_direction_examples() {
    let d = make_direction(0, &[2.0, 0.0], &[0.0, 0.0], Provenance::Tsv).unwrap();
    assert_eq!(d.vector, vec![1.0, 0.0]);
    let a = [0.3, -1.2, 4.0];
    let b = [1.0, 0.5, -0.5];
    let ab = make_direction(1, &a, &b, Provenance::Correction).unwrap();
    let ba = make_direction(1, &b, &a, Provenance::Correction).unwrap();
    assert!(ab.vector.iter().zip(&ba.vector).all(|(x, y)| *x == -*y));
    assert!(matches!(
        make_direction(0, &a, &a, Provenance::Tsv),
        Err(SteerError::DegenerateDirection(_))
    ));
    let mut r = rng::seeded(8);
    for _ in 0..50 {
        let u: Vec<f64> = (0..16).map(|_| r.random_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..16).map(|_| r.random_range(-5.0..5.0)).collect();
        let d = make_direction(0, &u, &v, Provenance::Tsv).unwrap();
        assert!((l2(&d.vector) - 1.0).abs() < 1e-9);
        d.validate().unwrap();
    }
}

#[test]
fn cosine_examples() {
    let u = [0.2, -3.0, 1.0];
    assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    let neg: Vec<f64> = u.iter().map(|x| -x).collect();
    assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert!(cosine(&u, &[0.0; 3]).is_err());
}

#[test]
fn random_directions() {
    let a = random_direction(2, 64, 5).unwrap();
    assert_eq!(a, random_direction(2, 64, 5).unwrap());
    assert!((l2(&a.vector) - 1.0).abs() < 1e-9);
    assert_eq!(a.provenance, Provenance::Random { seed: 5 });
    assert!(random_direction(0, 0, 1).is_err());
    let dirs: Vec<_> = (0..2000u64).map(|s| random_direction(0, 64, s).unwrap()).collect();
    let mean_abs: f64 = dirs
        .chunks(2)
        .map(|p| cosine(&p[0].vector, &p[1].vector).unwrap().abs())
        .sum::<f64>()
        / 1000.0;
    let expected = (2.0 / (std::f64::consts::PI * 64.0)).sqrt();
    assert!((mean_abs - 0.1).abs() <= 0.03, "{mean_abs}");
    assert!((mean_abs - expected).abs() <= 0.01, "{mean_abs} vs {expected}");
}

#[test]
fn tp_fn_direction_is_order_free() {
    let mut r = rng::seeded(9);
    let x = Array2::from_shape_simple_fn((30, 6), || r.random_range(-1.0f32..1.0));
    let asg: Vec<Assignment> = (0..30)
        .map(|i| [Assignment::Tp, Assignment::Fn, Assignment::Tn][i % 3])
        .collect();
    let d = tp_fn_direction(x.view(), &asg, 1, Provenance::Tsv).unwrap();
    let mut perm: Vec<usize> = (0..30).collect();
    perm.shuffle(&mut r);
    let xp = x.select(Axis(0), &perm);
    let ap: Vec<Assignment> = perm.iter().map(|&i| asg[i]).collect();
    assert_eq!(tp_fn_direction(xp.view(), &ap, 1, Provenance::Tsv).unwrap(), d);
    assert!(tp_fn_direction(x.view(), &[Assignment::Tp; 30], 1, Provenance::Tsv).is_err());
}

fn rank_table(rows: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

#[test]
fn critical_layer_examples() {
    let same = rank_table(&[vec![1.0, 5.0, 9.0], vec![2.0, 4.0, 8.0]]);
    let res = critical_layer(same.view(), same.view()).unwrap();
    assert_eq!(res.layer, 0);
    assert!(res.flagged);
    assert_eq!(res.d, vec![Some(0.0), Some(0.0)]);

    let mut r = rng::seeded(10);
    let tp = Array2::from_shape_fn((8, 12), |_| r.random_range(0.0..10.0));
    let fnr = Array2::from_shape_fn((8, 12), |(l, _)| {
        r.random_range(0.0..10.0) + if l == 5 { 30.0 } else { 0.0 }
    });
    let res = critical_layer(tp.view(), fnr.view()).unwrap();
    assert_eq!(res.layer, 5);
    assert!(!res.flagged);
    for l in 0..8 {
        let (a, b) = (fnr.row(l).to_vec(), tp.row(l).to_vec());
        let ma = a.iter().sum::<f64>() / 12.0;
        let mb = b.iter().sum::<f64>() / 12.0;
        let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 11.0;
        let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 11.0;
        let oracle = (ma - mb) / ((va + vb) / 2.0).sqrt();
        assert!((res.d[l].unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn critical_layer_excludes_constant_layers() {
    let tp = rank_table(&[vec![1.0, 1.0], vec![1.0, 2.0]]);
    let fnr = rank_table(&[vec![1.0, 1.0], vec![3.0, 4.0]]);
    let res = critical_layer(tp.view(), fnr.view()).unwrap();
    assert_eq!(res.d[0], None);
    assert_eq!(res.excluded, vec![0]);
    assert_eq!(res.layer, 1);
    let flat = rank_table(&[vec![1.0, 1.0]]);
    assert!(matches!(
        critical_layer(flat.view(), flat.view()),
        Err(SteerError::UndefinedEffect(_))
    ));
    assert!(matches!(
        critical_layer(rank_table(&[vec![1.0]]).view(), flat.view()),
        Err(SteerError::InsufficientData(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn probe_auroc_ignores_monotone_score_maps(seed in 0u64..500) {
        let mut r = rng::seeded(seed);
        let scores: Vec<f64> = (0..20).map(|_| r.random_range(-3.0..3.0)).collect();
        let labels: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
    }
}
