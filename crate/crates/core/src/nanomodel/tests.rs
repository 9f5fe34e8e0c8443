use std::sync::Arc;

use ndarray::Array2;

use super::backward::loss_and_grad;
use super::*;
use crate::concepts::OverrideMap;
use crate::corpus::{gen_synthetic_corpus, CorpusConfig};
use crate::rng;
use crate::sae::{ClampPlan, SaeModel};

fn tiny_config(concept: bool) -> ModelConfig {
    ModelConfig {
        vocab: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 16,
        max_seq: 10,
        concept: concept.then_some(ConceptTapConfig {
            n_concepts: 4,
            layer: 0,
            mix: 1.0,
        }),
        final_norm: true,
    }
}

fn tiny_model(concept: bool, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(tiny_config(concept), &mut rng::seeded(seed)).unwrap();
    if let Some(tap) = &mut p.concept {
        // Move concepts into the sigmoid's sensitive range and give the
        // embeddings enough weight to matter in the gradient check.
        tap.b.fill(0.0);
        tap.e.mapv_inplace(|v| v * 10.0);
    }
    p
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    use rand::Rng;
    let mut r = rng::seeded(seed);
    (0..n).map(|_| r.random_range(0..vocab as u32)).collect()
}

fn bits(a: &Array2<f32>) -> Vec<u32> {
    a.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn config_validation() {
    let mut c = tiny_config(false);
    c.n_heads = 3;
    assert!(matches!(c.validate(), Err(crate::SteerError::Config(_))));
    let mut c = tiny_config(true);
    c.concept.as_mut().unwrap().layer = 2;
    assert!(c.validate().is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let model = tiny_model(true, 3);
    let tokens = random_tokens(7, 12, 5);
    let positions = vec![3, 4, 5];
    let (_, grad) = loss_and_grad(&model, &tokens, &positions).unwrap();
    let names: Vec<String> = model.tensors().iter().map(|(n, _, _)| n.clone()).collect();
    let grads: Vec<Vec<f32>> = grad.tensors().iter().map(|(_, _, s)| s.to_vec()).collect();
    let eps = 1e-2f32;
    let mut checked = 0;
    for (ti, name) in names.iter().enumerate() {
        let len = grads[ti].len();
        for &idx in &[0, len / 3, len / 2, len - 1] {
            let mut plus = model.clone();
            plus.tensors_mut()[ti][idx] += eps;
            let mut minus = model.clone();
            minus.tensors_mut()[ti][idx] -= eps;
            let lp = super::backward::loss_only(&plus, &tokens, &positions).unwrap();
            let lm = super::backward::loss_only(&minus, &tokens, &positions).unwrap();
            let numeric = (lp - lm) / (2.0 * f64::from(eps));
            let analytic = f64::from(grads[ti][idx]);
            let tol = 2e-3 + 3e-2 * numeric.abs().max(analytic.abs());
            assert!(
                (numeric - analytic).abs() <= tol,
                "{name}[{idx}]: analytic {analytic}, numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn direction_hook_with_zero_alpha_is_bit_exact() {
    let model = tiny_model(true, 11);
    let v: Vec<f32> = (0..8).map(|i| (i as f32 - 3.5) * 0.7).collect();
    let decode = DecodeConfig::greedy(4, None);
    for seed in 0..10 {
        let prompt = random_tokens(4, 12, seed);
        let base = model.generate(&prompt, &decode, &Intervention::none()).unwrap();
        let hooks = [HookSpec::add_direction(1, v.clone(), 0.0)];
        let hooked = model.generate(&prompt, &decode, &Intervention::hooks(&hooks)).unwrap();
        assert_eq!(base, hooked);
        let a = model.forward(&prompt, &Intervention::none()).unwrap();
        let b = model.forward(&prompt, &Intervention::hooks(&hooks)).unwrap();
        assert_eq!(bits(&a.logits), bits(&b.logits));
        let none = [HookSpec {
            layer: 0,
            position: HookPosition::AllTokens,
            kind: HookKind::None,
        }];
        let c = model.forward(&prompt, &Intervention::hooks(&none)).unwrap();
        assert_eq!(bits(&a.logits), bits(&c.logits));
    }
}

#[test]
fn opposite_direction_hooks_cancel_exactly() {
    let model = tiny_model(false, 12);
    let v: Vec<f32> = (0..8).map(|i| ((i * 7) % 5) as f32 * 0.31 - 0.4).collect();
    for seed in 0..10 {
        let prompt = random_tokens(5, 12, 100 + seed);
        let hooks = [
            HookSpec::add_direction(0, v.clone(), 3.7),
            HookSpec::add_direction(0, v.clone(), -3.7),
        ];
        let a = model.forward(&prompt, &Intervention::none()).unwrap();
        let b = model.forward(&prompt, &Intervention::hooks(&hooks)).unwrap();
        assert_eq!(bits(&a.logits), bits(&b.logits));
        let single = [HookSpec::add_direction(0, v.clone(), 3.7)];
        let c = model.forward(&prompt, &Intervention::hooks(&single)).unwrap();
        assert_ne!(bits(&a.logits), bits(&c.logits));
    }
}

#[test]
fn last_token_hook_touches_only_the_final_position() {
    let model = tiny_model(false, 13);
    let prompt = random_tokens(6, 12, 1);
    let hooks = [HookSpec::add_direction(0, vec![1.0; 8], 2.0)];
    let a = model.forward(&prompt, &Intervention::none()).unwrap();
    let b = model.forward(&prompt, &Intervention::hooks(&hooks)).unwrap();
    for t in 0..5 {
        assert_eq!(a.logits.row(t), b.logits.row(t));
    }
    assert_ne!(a.logits.row(5), b.logits.row(5));
}

#[test]
fn greedy_decoding_is_deterministic() {
    let model = tiny_model(true, 21);
    let prompt = random_tokens(3, 12, 9);
    let decode = DecodeConfig::greedy(6, None);
    let a = model.generate(&prompt, &decode, &Intervention::none()).unwrap();
    let b = model.generate(&prompt, &decode, &Intervention::none()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
}

#[test]
fn temperature_sampling_is_seeded() {
    let model = tiny_model(false, 22);
    let prompt = random_tokens(3, 12, 4);
    let cfg = |seed| DecodeConfig {
        max_new_tokens: 6,
        mode: DecodeMode::Temperature { t: 1.0, seed },
        stop_token: None,
    };
    let a = model.generate(&prompt, &cfg(5), &Intervention::none()).unwrap();
    let b = model.generate(&prompt, &cfg(5), &Intervention::none()).unwrap();
    assert_eq!(a, b);
    assert!(model
        .generate(
            &prompt,
            &DecodeConfig {
                max_new_tokens: 1,
                mode: DecodeMode::Temperature { t: 0.0, seed: 1 },
                stop_token: None
            },
            &Intervention::none()
        )
        .is_err());
}

#[test]
fn generation_stops_at_context_limit_and_rejects_bad_tokens() {
    let model = tiny_model(false, 23);
    let out = model
        .generate(
            &random_tokens(8, 12, 2),
            &DecodeConfig::greedy(10, None),
            &Intervention::none(),
        )
        .unwrap();
    assert_eq!(out.len(), 2);
    assert!(matches!(
        model.generate(&[3, 12], &DecodeConfig::greedy(1, None), &Intervention::none()),
        Err(crate::SteerError::Input(_))
    ));
    assert!(model
        .generate(&[], &DecodeConfig::greedy(1, None), &Intervention::none())
        .is_err());
    let bad = [HookSpec::add_direction(0, vec![1.0; 7], 1.0)];
    assert!(model.forward(&[1, 2], &Intervention::hooks(&bad)).is_err());
    let bad = [HookSpec::add_direction(5, vec![1.0; 8], 1.0)];
    assert!(model.forward(&[1, 2], &Intervention::hooks(&bad)).is_err());
}

#[test]
fn final_layer_lens_matches_model_logits() {
    let model = tiny_model(true, 31);
    for seed in 0..20 {
        let prompt = random_tokens(1 + (seed as usize % 9), 12, 200 + seed);
        let out = model.forward(&prompt, &Intervention::none()).unwrap();
        let last = out.hidden.last().unwrap();
        let h = last.row(last.nrows() - 1).to_vec();
        let lens = logit_lens(&model, &h, 1).unwrap();
        let diff = lens
            .iter()
            .zip(out.last_logits())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-5, "seed {seed}: {diff}");
    }
}

#[test]
fn lens_identity_and_symmetry() {
    let mut cfg = tiny_config(false);
    cfg.vocab = 8;
    cfg.final_norm = false;
    let mut model = ModelParams::zeros(cfg).unwrap();
    for i in 0..8 {
        model.unembed[(i, i)] = 1.0;
    }
    let h = vec![0.5, -1.0, 2.0, 0.0, 3.25, -0.125, 7.0, 1.0];
    assert_eq!(logit_lens(&model, &h, 0).unwrap(), h);
    let normed = ModelParams::init(tiny_config(false), &mut rng::seeded(1)).unwrap();
    let zero = logit_lens(&normed, &[0.0; 8], 1).unwrap();
    assert!(zero.iter().all(|&z| z == zero[0]));
    assert!(logit_lens(&normed, &[0.0; 7], 1).is_err());
    assert!(logit_lens(&normed, &[0.0; 8], 2).is_err());
}

#[test]
fn zeroed_blocks_pass_embeddings_through() {
    let mut model = ModelParams::zeros(tiny_config(false)).unwrap();
    model.tok_emb.fill(0.25);
    let hidden = extract_hidden(&model, &[3, 4, 5], crate::activations::Pooling::MeanInput).unwrap();
    assert!(hidden[0].iter().all(|&v| v == 0.25));
    let single_mean = extract_hidden(&model, &[7], crate::activations::Pooling::MeanInput).unwrap();
    let single_last = extract_hidden(&model, &[7], crate::activations::Pooling::LastToken).unwrap();
    assert_eq!(single_mean, single_last);
    assert_eq!(single_mean.len(), 2);
    assert_eq!(single_mean[0].len(), 8);
}

#[test]
fn hazard_rank_rules() {
    assert_eq!(hazard_token_rank(&[0.1, 5.0, 0.2], &[1]).unwrap(), 1);
    assert_eq!(hazard_token_rank(&[1.0; 100], &[42]).unwrap(), 1);
    assert_eq!(hazard_token_rank(&[3.0, 2.0, 1.0], &[2]).unwrap(), 3);
    assert_eq!(hazard_token_rank(&[3.0, 2.0, 1.0], &[2, 1]).unwrap(), 2);
    assert!(hazard_token_rank(&[3.0], &[]).is_err());
    assert!(hazard_token_rank(&[3.0], &[4]).is_err());
    // Brute-force oracle: position in a stable descending sort, best tie.
    let logits = [0.3f32, 0.9, 0.3, -1.0, 0.9, 0.0];
    for id in 0..6u32 {
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        let first_equal = order.iter().position(|&j| logits[j] == logits[id as usize]).unwrap();
        assert_eq!(hazard_token_rank(&logits, &[id]).unwrap(), first_equal + 1);
    }
}

#[test]
fn concept_overrides_with_predicted_values_are_bit_exact() {
    let mut model = tiny_model(true, 41);
    let tap = model.concept.as_mut().unwrap();
    tap.w.row_mut(2).fill(0.0);
    tap.b[2] = 0.7;
    let predicted = crate::concepts::concept_forward(&[0.0; 8], tap).unwrap()[2];
    let prompt = random_tokens(5, 12, 77);
    let ov = OverrideMap::from_pairs([(2, predicted)]).unwrap();
    let a = model.forward(&prompt, &Intervention::none()).unwrap();
    let b = model.forward(&prompt, &Intervention::overrides(&ov)).unwrap();
    assert_eq!(bits(&a.logits), bits(&b.logits));
    let ov = OverrideMap::from_pairs([(2, 1.0)]).unwrap();
    let c = model.forward(&prompt, &Intervention::overrides(&ov)).unwrap();
    assert_ne!(bits(&a.logits), bits(&c.logits));
    let plain = tiny_model(false, 41);
    assert!(matches!(
        plain.forward(&prompt, &Intervention::overrides(&ov)),
        Err(crate::SteerError::Config(_))
    ));
}

#[test]
fn perfect_sae_substitution_is_bit_exact() {
    let model = tiny_model(true, 51);
    let sae = Arc::new(SaeModel::perfect(8));
    for seed in 0..10 {
        let prompt = random_tokens(6, 12, 300 + seed);
        for position in [HookPosition::AllTokens, HookPosition::LastToken] {
            let hooks = [HookSpec::sae_substitute(1, position, sae.clone(), ClampPlan::empty())];
            let a = model.forward(&prompt, &Intervention::none()).unwrap();
            let b = model.forward(&prompt, &Intervention::hooks(&hooks)).unwrap();
            assert_eq!(bits(&a.logits), bits(&b.logits));
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let model = tiny_model(true, 61);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.stlm");
    let vocab: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
    let ck = ModelCheckpoint {
        params: model,
        seed: 61,
        vocab,
    };
    ck.save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"STLM0001");
    std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
    assert!(matches!(
        ModelCheckpoint::load(&path),
        Err(crate::SteerError::Format { .. })
    ));
    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    std::fs::write(&path, &corrupt).unwrap();
    assert!(matches!(
        ModelCheckpoint::load(&path),
        Err(crate::SteerError::Format { offset: 0, .. })
    ));
}

fn small_train_setup() -> (crate::corpus::CaseSet, crate::corpus::Vocabulary, TrainConfig) {
    let ccfg = CorpusConfig {
        n_cases: 48,
        ..CorpusConfig::default()
    };
    let corpus = gen_synthetic_corpus(&ccfg, 42).unwrap();
    let vocab = ccfg.vocabulary().unwrap();
    let tcfg = TrainConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 32,
        concept: Some(ConceptTapConfig {
            n_concepts: 8,
            layer: 0,
            mix: 1.0,
        }),
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    (corpus, vocab, tcfg)
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let (corpus, vocab, tcfg) = small_train_setup();
    let (a, ra) = train_toy(&corpus, &vocab, &tcfg, 42).unwrap();
    assert!(ra.final_loss < ra.initial_loss, "{ra:?}");
    let (b, rb) = train_toy(&corpus, &vocab, &tcfg, 42).unwrap();
    assert_eq!(ra, rb);
    for ((_, _, x), (_, _, y)) in a.tensors().iter().zip(b.tensors()) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn training_is_independent_of_thread_count() {
    let (corpus, vocab, tcfg) = small_train_setup();
    let tcfg = TrainConfig { epochs: 1, ..tcfg };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train_toy(&corpus, &vocab, &tcfg, 7).unwrap().0)
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn training_reports_divergence() {
    let (corpus, vocab, tcfg) = small_train_setup();
    let tcfg = TrainConfig {
        lr: 1e30,
        grad_clip: 1e30,
        epochs: 2,
        ..tcfg
    };
    assert!(matches!(
        train_toy(&corpus, &vocab, &tcfg, 1),
        Err(crate::SteerError::Divergence { .. })
    ));
}
