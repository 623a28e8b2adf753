mod common;

use common::{jittered_model, random_tokens, reference, tiny_config};
use comp_core::model::{
    fidelity, load_checkpoint, mean_cross_entropy, perplexity, save_checkpoint, FfnKind, TokenBatch,
};
use comp_core::{DenseKind, Model, Vector};
use proptest::prelude::*;
use rand::Rng;

fn max_abs_diff(a: &comp_core::Matrix, b: &comp_core::Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn prune_randomly(model: &mut Model, seed: u64, frac: f64) {
    let mut r = common::rng(seed);
    for layer in &mut model.layers {
        for d in &mut layer.denses {
            let q = d.in_dim();
            let mask: Vec<bool> = (0..q).map(|j| j == 0 || r.gen::<f64>() > frac).collect();
            let tuned: Vec<f64> = (0..q).map(|_| r.gen_range(0.5..1.5)).collect();
            d.set_masks(mask, Vector(tuned));
        }
    }
}

#[test]
fn forward_matches_reference_gated_and_plain() {
    for (i, ffn) in [FfnKind::Gated, FfnKind::Plain].into_iter().enumerate() {
        let model = jittered_model(tiny_config(ffn), 10 + i as u64);
        let tokens = random_tokens(3, 20);
        let got = model.forward(&tokens).unwrap();
        let want = reference::forward(&model, &tokens);
        assert!(max_abs_diff(&got, &want) < 1e-9, "{ffn:?}: {}", max_abs_diff(&got, &want));
    }
}

#[test]
fn forward_honors_masks() {
    let mut model = jittered_model(tiny_config(FfnKind::Gated), 4);
    prune_randomly(&mut model, 5, 0.4);
    let tokens = random_tokens(6, 24);
    let got = model.forward(&tokens).unwrap();
    let want = reference::forward(&model, &tokens);
    assert!(max_abs_diff(&got, &want) < 1e-9);
}

#[test]
fn removed_layer_matches_reference() {
    let mut model = jittered_model(tiny_config(FfnKind::Gated), 7);
    model.remove_layer(2).unwrap();
    assert_eq!(model.layers.iter().map(|l| l.index).collect::<Vec<_>>(), vec![0, 1, 3]);
    let tokens = random_tokens(8, 16);
    assert!(max_abs_diff(&model.forward(&tokens).unwrap(), &reference::forward(&model, &tokens)) < 1e-9);
}

#[test]
fn pass_through_layer_is_identity_and_removable() {
    let mut model = jittered_model(tiny_config(FfnKind::Gated), 9);
    model.layers[1].make_pass_through();
    let tokens = random_tokens(11, 18);
    let (_, trace) = model.forward_capture(&[tokens.clone()], false).unwrap();
    assert_eq!(trace.layers[1].input, trace.layers[1].output);
    let full = model.forward(&tokens).unwrap();
    let mut removed = model.clone();
    removed.remove_layer(1).unwrap();
    assert!(max_abs_diff(&full, &removed.forward(&tokens).unwrap()) < 1e-12);
    let scores = comp_core::importance::score_layers(&trace).unwrap();
    assert!((scores[1].redundancy - 1.0).abs() < 1e-12);
    assert!(scores[1].importance.abs() < 1e-12);
}

#[test]
fn folding_preserves_logits() {
    let mut model = jittered_model(tiny_config(FfnKind::Gated), 12);
    prune_randomly(&mut model, 13, 0.5);
    let tokens = random_tokens(14, 32);
    let before = model.forward(&tokens).unwrap();
    model.fold_masks();
    assert!(model.layers.iter().all(|l| l.denses.iter().all(|d| d.tuned.iter().all(|&t| t == 0.0 || t == 1.0))));
    assert!(max_abs_diff(&before, &model.forward(&tokens).unwrap()) <= 1e-6);
}

#[test]
fn replay_reproduces_captured_outputs() {
    let model = jittered_model(tiny_config(FfnKind::Plain), 15);
    let batch = vec![random_tokens(1, 12), random_tokens(2, 30), random_tokens(3, 5)];
    let (logits, trace) = model.forward_capture(&batch, true).unwrap();
    assert_eq!(trace.tokens(), 47);
    for (pos, lt) in trace.layers.iter().enumerate() {
        let replay = model.replay_layer(pos, &lt.input, &trace.seq_lens);
        assert!(max_abs_diff(&replay, &lt.output) <= 1e-9);
        for kind in model.config.dense_kinds() {
            let x = lt.dense_input(*kind).unwrap();
            assert_eq!(x.rows(), 47);
            assert_eq!(x.cols(), model.layers[pos].dense(*kind).in_dim());
        }
    }
    let mut start = 0;
    for seq in &batch {
        let one = model.forward(seq).unwrap();
        for t in 0..seq.len() {
            for (a, b) in logits.row(start + t).iter().zip(one.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        start += seq.len();
    }
}

#[test]
fn attention_inputs_are_shared_across_qkv() {
    let model = jittered_model(tiny_config(FfnKind::Gated), 16);
    let (_, trace) = model.forward_capture(&[random_tokens(4, 10)], true).unwrap();
    let lt = &trace.layers[0];
    assert_eq!(lt.dense_input(DenseKind::QProj), lt.dense_input(DenseKind::VProj));
    assert_eq!(lt.dense_input(DenseKind::GateProj), lt.dense_input(DenseKind::UpProj));
    assert_ne!(lt.dense_input(DenseKind::QProj), lt.dense_input(DenseKind::OProj));
}

#[test]
fn causal_prefix_invariance() {
    let model = jittered_model(tiny_config(FfnKind::Gated), 17);
    let tokens = random_tokens(5, 25);
    let full = model.forward(&tokens).unwrap();
    let prefix = model.forward(&tokens[..10]).unwrap();
    for t in 0..10 {
        for (a, b) in full.row(t).iter().zip(prefix.row(t)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn perplexity_and_fidelity_match_reference() {
    let a = jittered_model(tiny_config(FfnKind::Gated), 18);
    let mut b = a.clone();
    prune_randomly(&mut b, 19, 0.3);
    let batch = vec![random_tokens(20, 32), random_tokens(21, 17)];
    let ce = mean_cross_entropy(&a, &batch).unwrap();
    assert!((ce - reference::cross_entropy(&a, &batch)).abs() < 1e-9);
    assert!((perplexity(&a, &batch).unwrap() - ce.exp()).abs() < 1e-9 * ce.exp());
    let f = fidelity(&a, &b, &batch).unwrap();
    let (kl, mse) = reference::fidelity(&a, &b, &batch);
    assert!((f.kl - kl).abs() < 1e-9 * kl.max(1.0));
    assert!((f.mse - mse).abs() < 1e-9 * mse.max(1.0));
    let same = fidelity(&a, &a, &batch).unwrap();
    assert_eq!((same.kl, same.mse), (0.0, 0.0));
}

#[test]
fn untrained_model_is_near_uniform() {
    let model = Model::random(comp_core::ModelConfig::default(), 0).unwrap();
    let text = common::random_corpus(1, 2048);
    let batch = TokenBatch::contiguous(&text, 128, 2048);
    let ppl = perplexity(&model, &batch.sequences).unwrap();
    assert!((ppl - 256.0).abs() < 5.0, "{ppl}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact_after_rounding() {
    let mut model = jittered_model(tiny_config(FfnKind::Gated), 22);
    prune_randomly(&mut model, 23, 0.3);
    model.remove_layer(3).unwrap();
    model.round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, model);
}

#[test]
fn bad_tokens_are_rejected() {
    let model = jittered_model(tiny_config(FfnKind::Gated), 24);
    assert!(model.forward(&[]).is_err());
    assert!(model.forward(&[0; 33]).is_err());
    let small = comp_core::ModelConfig {
        vocab: 16,
        ..tiny_config(FfnKind::Gated)
    };
    let m = Model::random(small, 1).unwrap();
    assert!(m.forward(&[3, 200]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fold_equivalence(seed in any::<u64>(), frac in 0.0f64..0.9, len in 1usize..20) {
        let mut model = jittered_model(tiny_config(FfnKind::Gated), seed);
        prune_randomly(&mut model, seed ^ 1, frac);
        let tokens = random_tokens(seed ^ 2, len);
        let before = model.forward(&tokens).unwrap();
        model.fold_masks();
        prop_assert!(max_abs_diff(&before, &model.forward(&tokens).unwrap()) <= 1e-6);
    }

    #[test]
    fn removing_layers_keeps_order(seed in any::<u64>(), pos in 0usize..4) {
        let mut model = jittered_model(tiny_config(FfnKind::Plain), seed);
        let removed = model.remove_layer(pos).unwrap();
        prop_assert_eq!(removed.index, pos);
        let idx: Vec<usize> = model.layers.iter().map(|l| l.index).collect();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(!idx.contains(&pos));
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>()) {
        let mut model = jittered_model(tiny_config(FfnKind::Gated), seed);
        model.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        prop_assert_eq!(load_checkpoint(dir.path()).unwrap(), model);
    }
}
