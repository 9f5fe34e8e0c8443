use std::collections::BTreeSet;

use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::corpus::Assignment;
use crate::rng;

fn random_layer(n: usize, d: usize, seed: u64) -> ConceptLayer {
    let mut r = rng::seeded(seed);
    let mut m = |rows, cols| Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0f32..1.0));
    let w = m(n, d);
    let e = m(n, d);
    let b = Array1::from_shape_fn(n, |i| i as f32 * 0.1 - 0.3);
    ConceptLayer::new(w, b, e).unwrap()
}

#[test]
fn zero_projection_gives_one_half() {
    let layer = ConceptLayer::zeros(5, 3);
    assert_eq!(concept_forward(&[1.0, -2.0, 3.0], &layer).unwrap(), vec![0.5; 5]);
}

#[test]
fn large_bias_saturates() {
    let mut layer = ConceptLayer::zeros(2, 3);
    layer.b.fill(50.0);
    for w in concept_forward(&[0.3, 0.1, -0.2], &layer).unwrap() {
        assert!((f64::from(w) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn concept_forward_matches_scalar_oracle() {
    let layer = random_layer(7, 5, 3);
    let h = [0.5f32, -0.25, 1.5, 0.0, -2.0];
    let out = concept_forward(&h, &layer).unwrap();
    for c in 0..7 {
        let z: f64 = f64::from(layer.b[c])
            + (0..5)
                .map(|i| f64::from(layer.w[(c, i)]) * f64::from(h[i]))
                .sum::<f64>();
        let expect = 1.0 / (1.0 + (-z).exp());
        assert!((f64::from(out[c]) - expect).abs() < 1e-6);
        assert!(out[c] > 0.0 && out[c] < 1.0);
    }
    assert!(matches!(
        concept_forward(&h[..4], &layer),
        Err(crate::SteerError::Input(_))
    ));
}

#[test]
fn steer_known_rules() {
    let w = vec![0.1f32, 0.7, 0.3];
    assert_eq!(steer_known(&w, &OverrideMap::new()).unwrap(), w);
    let same = OverrideMap::from_pairs([(1, 0.7)]).unwrap();
    assert_eq!(steer_known(&w, &same).unwrap(), w);
    let one = OverrideMap::from_pairs([(2, 1.0)]).unwrap();
    let out = steer_known(&w, &one).unwrap();
    assert_eq!(out[2], 1.0);
    assert_eq!(out[0].to_bits(), w[0].to_bits());
    assert_eq!(out[1].to_bits(), w[1].to_bits());
    assert!(OverrideMap::from_pairs([(0, 1.5)]).is_err());
    assert!(OverrideMap::from_pairs([(0, -0.1)]).is_err());
    assert!(steer_known(&w, &OverrideMap::from_pairs([(3, 0.5)]).unwrap()).is_err());
    let parsed: OverrideMap = serde_json::from_str(r#"{"0": 2.0}"#).unwrap();
    assert!(steer_known(&w, &parsed).is_err());
}

#[test]
fn steering_to_predicted_value_keeps_features_bit_identical() {
    let layer = random_layer(6, 4, 9);
    let w = concept_forward(&[0.2, -0.4, 0.9, 0.1], &layer).unwrap();
    let ov = OverrideMap::from_pairs([(0, w[0]), (4, w[4])]).unwrap();
    let a = known_features(&w, &layer).unwrap();
    let b = known_features(&steer_known(&w, &ov).unwrap(), &layer).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn known_features_basics() {
    let layer = random_layer(4, 3, 1);
    assert_eq!(known_features(&[0.0; 4], &layer).unwrap(), vec![0.0; 3]);
    let onehot = known_features(&[0.0, 0.0, 1.0, 0.0], &layer).unwrap();
    assert_eq!(onehot, layer.e.row(2).to_vec());
    let w = [0.3f32, 0.9, 0.05, 0.5];
    let out = known_features(&w, &layer).unwrap();
    for i in 0..3 {
        let mut acc = 0.0f64;
        for c in 0..4 {
            acc += f64::from(w[c]) * f64::from(layer.e[(c, i)]);
        }
        assert!((f64::from(out[i]) - acc).abs() < 1e-6);
    }
    assert!(known_features(&[0.0; 3], &layer).is_err());
}

proptest! {
    #[test]
    fn known_features_is_linear(
        w1 in proptest::collection::vec(0.0f32..1.0, 6),
        w2 in proptest::collection::vec(0.0f32..1.0, 6),
        a in -2.0f32..2.0,
        b in -2.0f32..2.0,
        seed in 0u64..1000,
    ) {
        let layer = random_layer(6, 5, seed);
        let mixed: Vec<f32> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let lhs = known_features(&mixed, &layer).unwrap();
        let f1 = known_features(&w1, &layer).unwrap();
        let f2 = known_features(&w2, &layer).unwrap();
        for i in 0..5 {
            prop_assert!((lhs[i] - (a * f1[i] + b * f2[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn loo_selection_ignores_the_left_out_row(seed in 0u64..500, case in 0usize..12, noise in proptest::collection::vec(-5.0f32..5.0, 8)) {
        let (mut activ, assignments, categories) = loo_fixture(seed);
        let before = loo_select_concepts(activ.view(), &assignments, &categories, case, 3).unwrap();
        for (c, v) in noise.iter().enumerate() {
            activ[(case, c)] = *v;
        }
        let after = loo_select_concepts(activ.view(), &assignments, &categories, case, 3).unwrap();
        prop_assert_eq!(before, after);
    }
}

fn loo_fixture(seed: u64) -> (Array2<f32>, Vec<Assignment>, Vec<String>) {
    let mut r = rng::seeded(seed);
    let activ = Array2::from_shape_fn((12, 8), |_| r.random_range(0.0f32..1.0));
    let assignments = [Assignment::Tp, Assignment::Fn, Assignment::Tn]
        .iter()
        .cycle()
        .take(12)
        .copied()
        .collect();
    let categories = (0..12)
        .map(|i| {
            if i % 3 == 2 {
                "benign".into()
            } else {
                format!("cat{}", i % 2)
            }
        })
        .collect();
    (activ, assignments, categories)
}

#[test]
fn loo_ranks_the_separating_concept_first() {
    let activ = array![[1.0f32, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
    let asg = vec![Assignment::Tp, Assignment::Tp, Assignment::Fn, Assignment::Fn];
    let cats = vec!["a".to_string(); 4];
    let sel = loo_select_concepts(activ.view(), &asg, &cats, 0, 2).unwrap();
    assert_eq!(sel.concepts, vec![0, 1]);
    assert_eq!(sel.scope, SelectionScope::Category);
}

#[test]
fn loo_matches_exhaustive_recompute_on_five_cases() {
    let activ = array![
        [0.9f32, 0.1, 0.4, 0.2],
        [0.8, 0.3, 0.5, 0.2],
        [0.1, 0.2, 0.6, 0.9],
        [0.2, 0.1, 0.5, 0.7],
        [0.5, 0.5, 0.5, 0.5]
    ];
    let asg = vec![
        Assignment::Tp,
        Assignment::Tp,
        Assignment::Fn,
        Assignment::Fn,
        Assignment::Tn,
    ];
    let cats: Vec<String> = vec!["x".into(), "x".into(), "x".into(), "x".into(), "benign".into()];
    for case in 0..5 {
        let tp: Vec<usize> = (0..4).filter(|&r| r != case && r < 2).collect();
        let fnr: Vec<usize> = (0..4).filter(|&r| r != case && r >= 2).collect();
        let mut diffs: Vec<(usize, f64)> = (0..4)
            .map(|c| {
                let m =
                    |rows: &Vec<usize>| rows.iter().map(|&r| f64::from(activ[(r, c)])).sum::<f64>() / rows.len() as f64;
                (c, (m(&tp) - m(&fnr)).abs())
            })
            .collect();
        diffs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expect: Vec<usize> = diffs.iter().take(3).map(|d| d.0).collect();
        let got = loo_select_concepts(activ.view(), &asg, &cats, case, 3).unwrap();
        assert_eq!(got.concepts, expect, "case {case}");
    }
}

#[test]
fn loo_falls_back_to_global_and_reports_insufficient_data() {
    let activ = Array2::from_shape_fn((6, 3), |(r, c)| (r * 3 + c) as f32 / 20.0);
    let asg = vec![
        Assignment::Tp,
        Assignment::Fn,
        Assignment::Tp,
        Assignment::Fn,
        Assignment::Tp,
        Assignment::Tn,
    ];
    let cats: Vec<String> = ["a", "a", "b", "b", "c", "benign"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let sel = loo_select_concepts(activ.view(), &asg, &cats, 0, 2).unwrap();
    assert_eq!(sel.scope, SelectionScope::Global);
    let only_tp = vec![Assignment::Tp; 6];
    assert!(matches!(
        loo_select_concepts(activ.view(), &only_tp, &cats, 0, 2),
        Err(crate::SteerError::InsufficientData(_))
    ));
    assert!(loo_select_concepts(activ.view(), &asg, &cats, 9, 2).is_err());
}

#[test]
fn tp_target_rules() {
    let cats = vec!["a".to_string(); 3];
    let single = array![[0.3f32], [0.9], [0.2]];
    let asg = vec![Assignment::Tp, Assignment::Fn, Assignment::Fn];
    let t = tp_targets(
        single.view(),
        &asg,
        &cats,
        1,
        &[0],
        TargetMode::TpMean,
        SelectionScope::Category,
    )
    .unwrap();
    assert_eq!(t.get(0), Some(0.3));
    assert!(matches!(
        tp_targets(
            single.view(),
            &asg,
            &cats,
            1,
            &[0],
            TargetMode::P95,
            SelectionScope::Category
        ),
        Err(crate::SteerError::InsufficientData(_))
    ));
    assert!(tp_targets(
        single.view(),
        &asg,
        &cats,
        0,
        &[0],
        TargetMode::TpMean,
        SelectionScope::Category
    )
    .is_err());

    let equal = Array2::from_elem((5, 1), 0.1f32);
    let asg = vec![Assignment::Tp; 5];
    let cats = vec!["a".to_string(); 5];
    let t = tp_targets(
        equal.view(),
        &asg,
        &cats,
        4,
        &[0],
        TargetMode::P95,
        SelectionScope::Category,
    )
    .unwrap();
    assert_eq!(t.get(0), Some(0.1));
}

#[test]
fn p95_matches_sort_and_interpolate_oracle() {
    let n = 101;
    let mut values: Vec<f32> = (1..=100).map(|v| v as f32 / 100.0).collect();
    values.reverse();
    values.push(0.5);
    let activ = Array2::from_shape_vec((n, 1), values.clone()).unwrap();
    let asg: Vec<Assignment> = (0..n)
        .map(|i| if i == n - 1 { Assignment::Fn } else { Assignment::Tp })
        .collect();
    let cats = vec!["a".to_string(); n];
    let got = tp_targets(
        activ.view(),
        &asg,
        &cats,
        n - 1,
        &[0],
        TargetMode::P95,
        SelectionScope::Category,
    )
    .unwrap();
    let mut sorted: Vec<f64> = values[..100].iter().map(|&v| f64::from(v)).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos: f64 = 0.95 * 99.0;
    let lo = pos.floor() as usize;
    let expect = sorted[lo] + (sorted[lo + 1] - sorted[lo]) * (pos - lo as f64);
    assert!((f64::from(got.get(0).unwrap()) - expect).abs() < 1e-6);
}

#[test]
fn tp_targets_respect_scope() {
    let activ = array![[0.2f32], [0.8], [0.5]];
    let asg = vec![Assignment::Tp, Assignment::Tp, Assignment::Fn];
    let cats: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
    let cat = tp_targets(
        activ.view(),
        &asg,
        &cats,
        2,
        &[0],
        TargetMode::TpMean,
        SelectionScope::Category,
    )
    .unwrap();
    assert_eq!(cat.get(0), Some(0.2));
    let global = tp_targets(
        activ.view(),
        &asg,
        &cats,
        2,
        &[0],
        TargetMode::TpMean,
        SelectionScope::Global,
    )
    .unwrap();
    assert!((global.get(0).unwrap() - 0.5).abs() < 1e-7);
}

#[test]
fn random_concept_rules() {
    let exclude: BTreeSet<usize> = [1, 3].into_iter().collect();
    let mut all = random_concepts(6, 4, &exclude, 7).unwrap();
    all.sort();
    assert_eq!(all, vec![0, 2, 4, 5]);
    assert_eq!(
        random_concepts(50, 10, &exclude, 3).unwrap(),
        random_concepts(50, 10, &exclude, 3).unwrap()
    );
    assert!(matches!(
        random_concepts(6, 5, &exclude, 1),
        Err(crate::SteerError::InsufficientData(_))
    ));
}

#[test]
fn random_concepts_are_uniform() {
    let (n, k, trials) = (20usize, 5usize, 10_000u64);
    let exclude: BTreeSet<usize> = [0, 7, 13].into_iter().collect();
    let pool = n - exclude.len();
    let mut counts = vec![0u64; n];
    for seed in 0..trials {
        for c in random_concepts(n, k, &exclude, seed).unwrap() {
            counts[c] += 1;
        }
    }
    let p = k as f64 / pool as f64;
    let expect = p * trials as f64;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for c in 0..n {
        if exclude.contains(&c) {
            assert_eq!(counts[c], 0);
        } else {
            assert!(
                (counts[c] as f64 - expect).abs() <= 3.0 * sigma,
                "concept {c}: {}",
                counts[c]
            );
        }
    }
}

#[test]
fn sparsity_report_shape() {
    let activ = array![[0.001f32, 0.9], [0.005, 0.2], [0.5, 0.3]];
    let asg = vec![Assignment::Tp, Assignment::Fn, Assignment::Tn];
    let r = sparsity_report(activ.view(), &asg, &[1]).unwrap();
    assert!((r.fraction_below_threshold - 2.0 / 6.0).abs() < 1e-12);
    assert!((r.steered_gap - 0.7).abs() < 1e-6);
    let md = r.to_markdown();
    assert!(md.starts_with("| Statistic | Value |"));
    assert!(md.contains("TP − FN gap"));
}
