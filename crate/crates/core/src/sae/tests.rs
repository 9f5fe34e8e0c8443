use std::sync::Arc;

use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::activations::{ActivationTensor, Pooling, RowIndex};
use crate::corpus::Assignment;
use crate::nanomodel::{ConceptTapConfig, HookPosition, HookSpec, Intervention, ModelConfig, ModelParams};
use crate::rng;

fn random_sae(d: usize, width: usize, seed: u64) -> SaeModel {
    let mut r = rng::seeded(seed);
    let mut m = |rows, cols| Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0f32..1.0));
    let w_enc = m(d, width);
    let mut sae = SaeModel {
        w_enc,
        b_enc: Array1::from_shape_fn(width, |j| (j as f32 * 0.13).sin() * 0.2),
        w_dec: m(width, d),
        b_dec: Array1::from_shape_fn(d, |i| i as f32 * 0.05),
        l1_coeff: DEFAULT_L1,
    };
    sae.renormalize_decoder();
    sae
}

fn per_token(data: Vec<f32>, cols: usize) -> ActivationTensor {
    let rows = data.len() / cols;
    let index = RowIndex::Tokens((0..rows).map(|i| (format!("c{}", i / 4), i % 4)).collect());
    ActivationTensor::new(0, Pooling::PerToken, cols, data, index).unwrap()
}

#[test]
fn forward_with_zero_input() {
    let mut sae = random_sae(4, 6, 1);
    sae.b_enc.fill(0.0);
    let (f, h_hat) = sae_forward(&[0.0; 4], &sae).unwrap();
    assert_eq!(f, vec![0.0; 6]);
    assert_eq!(h_hat, sae.b_dec.to_vec());
    sae.b_dec.fill(0.0);
    assert_eq!(sae_forward(&[0.0; 4], &sae).unwrap().1, vec![0.0; 4]);
    assert!(sae_forward(&[0.0; 3], &sae).is_err());
}

#[test]
fn forward_matches_explicit_loop_oracle() {
    let sae = random_sae(5, 9, 2);
    let h = [0.3f32, -1.2, 0.8, 0.05, -0.4];
    let (f, h_hat) = sae_forward(&h, &sae).unwrap();
    for j in 0..9 {
        let mut z = f64::from(sae.b_enc[j]);
        for i in 0..5 {
            z += f64::from(h[i]) * f64::from(sae.w_enc[(i, j)]);
        }
        assert!((f64::from(f[j]) - z.max(0.0)).abs() < 1e-5);
    }
    for i in 0..5 {
        let mut v = f64::from(sae.b_dec[i]);
        for j in 0..9 {
            v += f64::from(f[j]) * f64::from(sae.w_dec[(j, i)]);
        }
        assert!((f64::from(h_hat[i]) - v).abs() < 1e-5);
    }
    let (bf, bh) = super::train::forward_batch(&sae, &Array2::from_shape_vec((1, 5), h.to_vec()).unwrap().view());
    for j in 0..9 {
        assert!((bf[(0, j)] - f[j]).abs() < 1e-5);
    }
    for i in 0..5 {
        assert!((bh[(0, i)] - h_hat[i]).abs() < 1e-5);
    }
}

#[test]
fn perfect_sae_reconstructs_exactly() {
    let sae = SaeModel::perfect(6);
    assert!(sae.max_atom_norm_error() <= UNIT_NORM_TOL);
    let h = [1.5f32, -0.25, 0.0, 3.0, -7.5, 1e-3];
    let (_, h_hat) = sae_forward(&h, &sae).unwrap();
    assert_eq!(
        h_hat.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        h.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn constructor_checks_invariants() {
    let sae = random_sae(3, 4, 3);
    assert!(SaeModel::new(
        sae.w_enc.clone(),
        sae.b_enc.clone(),
        sae.w_dec.clone(),
        sae.b_dec.clone(),
        0.1
    )
    .is_ok());
    let doubled = sae.w_dec.mapv(|v| v * 2.0);
    assert!(SaeModel::new(sae.w_enc.clone(), sae.b_enc.clone(), doubled, sae.b_dec.clone(), 0.1).is_err());
    assert!(SaeModel::new(
        sae.w_enc.clone(),
        Array1::zeros(3),
        sae.w_dec.clone(),
        sae.b_dec.clone(),
        0.1
    )
    .is_err());
}

#[test]
fn clamp_rules() {
    let f = vec![0.0f32, 1.0, 2.0, 3.0];
    assert_eq!(clamp_features(&f, &ClampPlan::empty()).unwrap(), f);
    let same = ClampPlan::new([(1, 1.0), (3, 3.0)].into_iter().collect(), 1.0, ClampMode::HazardTopK).unwrap();
    assert_eq!(clamp_features(&f, &same).unwrap(), f);
    let one = ClampPlan::new([(2, 5.0)].into_iter().collect(), 2.0, ClampMode::HazardTopK).unwrap();
    let out = clamp_features(&f, &one).unwrap();
    assert_eq!(out, vec![0.0, 1.0, 5.0, 3.0]);
    let oob = ClampPlan::new([(4, 1.0)].into_iter().collect(), 1.0, ClampMode::HazardTopK).unwrap();
    assert!(clamp_features(&f, &oob).is_err());
    assert!(ClampPlan::new([(0, -1.0)].into_iter().collect(), 1.0, ClampMode::HazardTopK).is_err());
}

fn planted(d: usize, atoms: usize, n: usize, seed: u64) -> (Vec<Vec<f32>>, ActivationTensor) {
    let mut r = rng::seeded(seed);
    let dict: Vec<Vec<f32>> = (0..atoms)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mut h = vec![0.0f32; d];
        for i in rand::seq::index::sample(&mut r, atoms, 2) {
            let c: f32 = r.random_range(0.5..1.5);
            h.iter_mut().zip(&dict[i]).for_each(|(x, a)| *x += c * a);
        }
        data.extend(h);
    }
    (dict, per_token(data, d))
}

#[test]
fn training_recovers_a_small_planted_dictionary() {
    let (dict, acts) = planted(16, 24, 3000, 5);
    let cfg = SaeTrainConfig {
        width: 48,
        epochs: 60,
        batch_size: 64,
        lr: 3e-3,
        ..SaeTrainConfig::default()
    };
    let (sae, report) = train_sae(&acts, &cfg, 42).unwrap();
    let recovered = dict
        .iter()
        .filter(|a| {
            sae.w_dec
                .rows()
                .into_iter()
                .map(|r| r.iter().zip(a.iter()).map(|(x, y)| x * y).sum::<f32>())
                .fold(f32::MIN, f32::max)
                >= 0.9
        })
        .count();
    assert!(recovered * 10 >= dict.len() * 8, "recovered {recovered}/{}", dict.len());
    assert!(report.max_atom_norm_error <= UNIT_NORM_TOL);
    assert!(report.fvu < 0.1, "{report:?}");
    assert!(report.epoch_losses.last() < report.epoch_losses.first());
}

#[test]
fn zero_epochs_returns_normalized_initialization() {
    let (_, acts) = planted(8, 8, 300, 1);
    let cfg = SaeTrainConfig {
        width: 20,
        epochs: 0,
        batch_size: 64,
        ..SaeTrainConfig::default()
    };
    let (a, report) = train_sae(&acts, &cfg, 9).unwrap();
    let (b, _) = train_sae(&acts, &cfg, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(report.steps, 0);
    assert!(a.max_atom_norm_error() <= UNIT_NORM_TOL);
    let (c, _) = train_sae(&acts, &cfg, 10).unwrap();
    assert_ne!(a, c);
}

#[test]
fn training_is_bit_reproducible() {
    let (_, acts) = planted(8, 8, 500, 2);
    let cfg = SaeTrainConfig {
        width: 16,
        epochs: 3,
        batch_size: 64,
        ..SaeTrainConfig::default()
    };
    let (a, ra) = train_sae(&acts, &cfg, 3).unwrap();
    let (b, rb) = train_sae(&acts, &cfg, 3).unwrap();
    assert_eq!(ra, rb);
    assert!(a
        .w_dec
        .iter()
        .zip(b.w_dec.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a
        .w_enc
        .iter()
        .zip(b.w_enc.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn training_errors() {
    let (_, acts) = planted(8, 8, 100, 2);
    let cfg = SaeTrainConfig {
        width: 16,
        batch_size: 256,
        ..SaeTrainConfig::default()
    };
    assert!(matches!(
        train_sae(&acts, &cfg, 1),
        Err(crate::SteerError::InsufficientData(_))
    ));
    let cfg = SaeTrainConfig {
        width: 16,
        batch_size: 32,
        lr: 1e30,
        epochs: 3,
        ..SaeTrainConfig::default()
    };
    assert!(matches!(
        train_sae(&acts, &cfg, 1),
        Err(crate::SteerError::Divergence { .. })
    ));
    let cfg = SaeTrainConfig {
        width: 0,
        ..SaeTrainConfig::default()
    };
    assert!(matches!(train_sae(&acts, &cfg, 1), Err(crate::SteerError::Config(_))));
}

fn assignments(n_h: usize, n_b: usize) -> Vec<Assignment> {
    (0..n_h)
        .map(|i| if i % 2 == 0 { Assignment::Tp } else { Assignment::Fn })
        .chain((0..n_b).map(|_| Assignment::Tn))
        .collect()
}

#[test]
fn identical_feature_is_not_significant_and_disjoint_one_is() {
    let asg = assignments(20, 20);
    let mut means = Array2::<f32>::zeros((40, 3));
    for i in 0..40 {
        means[(i, 0)] = 0.5;
        means[(i, 1)] = if i < 20 { 10.0 + i as f32 } else { i as f32 * 0.1 };
        means[(i, 2)] = (i % 7) as f32;
    }
    let table = select_features(means.view(), &asg, 0.05).unwrap();
    assert!(!table.rows[0].significant);
    assert!(table.rows[1].significant && table.rows[1].positive);
    assert_eq!(table.hazard_features(), vec![1]);
    for r in &table.rows {
        assert_eq!(r.significant, r.q < table.q_threshold);
    }
    assert!(table.to_csv().starts_with("feature,u,p,q"));
    assert_eq!(table.to_csv().lines().count(), 4);
}

#[test]
fn selection_rejects_single_class() {
    let means = Array2::<f32>::zeros((5, 2));
    assert!(matches!(
        select_features(means.view(), &[Assignment::Tn; 5], 0.05),
        Err(crate::SteerError::InsufficientData(_))
    ));
    assert!(select_features(means.view(), &[Assignment::Tn; 4], 0.05).is_err());
}

#[test]
fn null_selection_rarely_discovers_anything() {
    let asg = assignments(30, 30);
    let mut runs_with_discovery = 0;
    for seed in 0..100 {
        let mut r = rng::stream(seed, "sae-null");
        let means = Array2::from_shape_simple_fn((60, 40), || r.random::<f32>());
        if select_features(means.view(), &asg, 0.05).unwrap().n_significant() > 0 {
            runs_with_discovery += 1;
        }
    }
    assert!(
        runs_with_discovery <= 8,
        "{runs_with_discovery} of 100 null runs had discoveries"
    );
}

proptest! {
    #[test]
    fn selection_is_invariant_to_monotone_transforms(seed in 0u64..1000) {
        let asg = assignments(8, 9);
        let mut r = rng::seeded(seed);
        let shift: Vec<f32> = (0..5).map(|j| j as f32 * 0.3).collect();
        let means = Array2::from_shape_fn((17, 5), |(i, j)| r.random::<f32>() + if i < 8 { shift[j] } else { 0.0 });
        let transformed = means.mapv(|v| (3.0 * v).exp() + 1.0);
        let a = select_features(means.view(), &asg, 0.05).unwrap();
        let b = select_features(transformed.view(), &asg, 0.05).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            prop_assert_eq!(x.u, y.u);
            prop_assert_eq!(x.p, y.p);
            prop_assert_eq!(x.significant, y.significant);
        }
    }
}

#[test]
fn clamp_plans_from_the_table() {
    let asg = assignments(20, 20);
    let means = Array2::from_shape_fn((40, 6), |(i, j)| {
        if j < 2 && i < 20 {
            5.0 + i as f32
        } else {
            ((i * 7 + j) % 11) as f32 * 0.1
        }
    });
    let table = select_features(means.view(), &asg, 0.05).unwrap();
    let hazard = table.hazard_features();
    assert_eq!(hazard.len(), 2);
    let plan = build_clamp_plan(&table, &hazard, 2.0).unwrap();
    for &id in &hazard {
        assert!((plan.targets()[&id] - 2.0 * table.rows[id].tp_mean as f32).abs() < 1e-5);
    }
    let control = random_clamp_plan(&table, 3, 1.0, 11).unwrap();
    assert_eq!(control.mode, ClampMode::RandomControl);
    assert!(control.targets().keys().all(|id| !table.rows[*id].significant));
    assert_eq!(control, random_clamp_plan(&table, 3, 1.0, 11).unwrap());
    assert!(random_clamp_plan(&table, 5, 1.0, 11).is_err());
}

#[test]
fn case_means_average_token_rows() {
    let sae = SaeModel::perfect(2);
    let index = RowIndex::Tokens(vec![("a".into(), 0), ("a".into(), 1), ("b".into(), 0)]);
    let acts = ActivationTensor::new(0, Pooling::PerToken, 2, vec![1.0, -1.0, 3.0, 1.0, 0.5, 0.5], index).unwrap();
    let means = case_feature_means(&sae, &acts, &["a".into(), "b".into()]).unwrap();
    assert_eq!(means, array![[2.0f32, 0.5, 0.0, 0.5], [0.5, 0.5, 0.0, 0.0]]);
    assert!(case_feature_means(&sae, &acts, &["a".into(), "z".into()]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.saem");
    let ck = SaeCheckpoint {
        sae: random_sae(4, 7, 8),
        layer: 2,
        seed: 8,
    };
    ck.save(&path).unwrap();
    assert_eq!(SaeCheckpoint::load(&path).unwrap(), ck);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"SAEM0001");
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        SaeCheckpoint::load(&path),
        Err(crate::SteerError::Format { .. })
    ));
}

fn hook_model() -> ModelParams {
    let cfg = ModelConfig {
        vocab: 10,
        d_model: 6,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 12,
        max_seq: 8,
        concept: Some(ConceptTapConfig {
            n_concepts: 3,
            layer: 1,
            mix: 1.0,
        }),
        final_norm: true,
    };
    ModelParams::init(cfg, &mut rng::seeded(4)).unwrap()
}

#[test]
fn substitution_error_shrinks_logit_delta() {
    let model = hook_model();
    let prompt = [1u32, 4, 7, 2, 9];
    let base = model.forward(&prompt, &Intervention::none()).unwrap().logits;
    let v: Vec<f32> = (0..6).map(|i| (i as f32 - 2.5) / 3.0).collect();
    let mut deltas = Vec::new();
    for scale in [1.0f32, 0.3, 0.1, 0.03, 0.01] {
        let mut sae = SaeModel::perfect(6);
        sae.b_dec = Array1::from_iter(v.iter().map(|x| x * scale));
        let hooks = [HookSpec::sae_substitute(
            0,
            HookPosition::AllTokens,
            Arc::new(sae),
            ClampPlan::empty(),
        )];
        let logits = model.forward(&prompt, &Intervention::hooks(&hooks)).unwrap().logits;
        deltas.push((&logits - &base).iter().fold(0.0f32, |m, d| m.max(d.abs())));
    }
    assert!(deltas.windows(2).all(|w| w[1] < w[0]), "{deltas:?}");
    assert!(deltas[4] < 0.05 * deltas[0]);
}
