//! Four-branch model: self-pair identity, swap symmetry, weight sharing,
//! loss composition, inference modes and alignment maps.

mod common;

use cadg::model::{CadgWeights, InferMode, LossWeights, ModelConfig};
use cadg::optim::OptimizerState;
use cadg::{Graph, Tensor};
use common::{images, rng, small_model, weights};
use proptest::prelude::*;

/// Closed-form parameter count of one single-stream ViT plus classifier.
pub fn single_stream_parameter_count(cfg: &ModelConfig) -> usize {
    let p = &cfg.patch;
    let (d, h, k) = (p.model_dim, cfg.mlp_hidden, cfg.classes);
    let embed = p.patch_dim() * d + d + d + p.token_count() * d;
    let layer = 2 * d + 4 * d * d + 2 * d + d * h + h + h * d + d;
    embed + cfg.layers * layer + 2 * d + d * k + k
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identical_inputs_make_cross_streams_copy_self_streams(seed in any::<u64>(), b in 1usize..4) {
        let w = weights(seed, LossWeights([0.3, 0.2, 0.3, 0.2]));
        let x = images(&mut rng(seed ^ 1), b);
        let mut g = Graph::new();
        let bw = w.bind(&mut g, false);
        let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
        let trace = w.forward(&mut g, &bw, &x, &x, &labels).unwrap();
        for st in &trace.layers {
            prop_assert_eq!(g.value(st.c1), g.value(st.s1));
            prop_assert_eq!(g.value(st.c2), g.value(st.s2));
        }
        let out = trace.output(&g);
        prop_assert_eq!(out.loss_c1, out.loss_s1);
        prop_assert_eq!(out.loss_c2, out.loss_s2);
    }

    #[test]
    fn swapping_inputs_swaps_branch_roles(seed in any::<u64>(), b in 1usize..4) {
        let w = weights(seed, LossWeights([0.1, 0.1, 0.4, 0.4]));
        let mut r = rng(seed ^ 2);
        let (x1, x2) = (images(&mut r, b), images(&mut r, b));
        let labels: Vec<usize> = (0..b).map(|i| (i + 1) % 3).collect();
        let a = w.forward_eval(&x1, &x2, &labels).unwrap();
        let s = w.forward_eval(&x2, &x1, &labels).unwrap();
        prop_assert_eq!(&a.logits_s1, &s.logits_s2);
        prop_assert_eq!(&a.logits_s2, &s.logits_s1);
        prop_assert_eq!(&a.logits_c1, &s.logits_c2);
        prop_assert_eq!(&a.logits_c2, &s.logits_c1);
        prop_assert!((a.loss_total - s.loss_total).abs() <= 1e-12);
    }

    #[test]
    fn loss_total_is_the_weighted_sum(seed in any::<u64>(), l in prop::array::uniform4(0.0f64..2.0)) {
        let w = weights(seed, LossWeights(l));
        let mut r = rng(seed ^ 3);
        let out = w.forward_eval(&images(&mut r, 2), &images(&mut r, 2), &[2, 0]).unwrap();
        let c = out.components();
        let expected = l[0] * c[0] + l[1] * c[1] + l[2] * c[2] + l[3] * c[3];
        prop_assert!((out.loss_total - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn self_and_self_pair_inference_agree(seed in any::<u64>()) {
        let w = weights(seed, LossWeights::default());
        let x = images(&mut rng(seed ^ 4), 6);
        prop_assert_eq!(w.infer(&x, InferMode::SelfStream).unwrap(), w.infer(&x, InferMode::SelfPair).unwrap());
    }
}

#[test]
fn parameter_count_matches_one_single_stream_network() {
    for (layers, dim, heads, patch, hidden, classes) in [(2, 8, 1, 2, 16, 3), (4, 64, 4, 8, 128, 4), (3, 12, 3, 4, 7, 5)] {
        let mut cfg = small_model();
        cfg.layers = layers;
        cfg.patch.model_dim = dim;
        cfg.patch.head_count = heads;
        cfg.patch.patch_size = patch;
        cfg.patch.image_height = 2 * patch;
        cfg.patch.image_width = 2 * patch;
        cfg.mlp_hidden = hidden;
        cfg.classes = classes;
        let w = CadgWeights::init(cfg, LossWeights::default(), &mut rng(0)).unwrap();
        assert_eq!(w.parameter_count(), single_stream_parameter_count(&cfg));
    }
}

#[test]
fn a_cross_only_step_moves_the_self_stream() {
    let mut w = weights(8, LossWeights([0.0, 0.0, 0.5, 0.5]));
    let mut r = rng(80);
    let (x1, x2) = (images(&mut r, 4), images(&mut r, 4));
    let probe = images(&mut r, 4);
    let before = w.logits(&probe).unwrap();

    let mut g = Graph::new();
    let bw = w.bind(&mut g, true);
    let trace = w.forward(&mut g, &bw, &x1, &x2, &[0, 1, 2, 0]).unwrap();
    g.backward(trace.total).unwrap();
    w.params_mut().absorb_grads(&g, &bw.all).unwrap();
    OptimizerState::new(w.params(), 0.5, 0.0, 0.0).unwrap().step(w.params_mut()).unwrap();

    let after = w.logits(&probe).unwrap();
    assert!(before.max_abs_diff(&after).unwrap() > 1e-6);
    // The updated weights still drive all four branches: the identity holds.
    let out = w.forward_eval(&probe, &probe, &[0, 1, 2, 0]).unwrap();
    assert_eq!(out.logits_c1, out.logits_s1);
    assert_eq!(out.logits_s1, after);
}

#[test]
fn weights_are_bound_once_per_graph() {
    let w = weights(1, LossWeights::default());
    let mut r = rng(10);
    let mut g = Graph::new();
    let bw = w.bind(&mut g, true);
    let leaves = g.len();
    assert_eq!(leaves, w.params().len());
    let trace = w.forward(&mut g, &bw, &images(&mut r, 2), &images(&mut r, 2), &[0, 1]).unwrap();
    g.backward(trace.total).unwrap();
    // Every parameter receives gradient through the single bound copy.
    for (&v, p) in bw.all.iter().zip(w.params().iter()) {
        assert!(g.grad(v).is_some(), "{}", p.name);
    }
}

#[test]
fn random_weights_score_at_chance() {
    let mut cfg = small_model();
    cfg.classes = 4;
    let w = CadgWeights::init(cfg, LossWeights::default(), &mut rng(12)).unwrap();
    let mut r = rng(13);
    let x = images(&mut r, 2000);
    let labels: Vec<usize> = (0..2000).map(|_| rand::Rng::gen_range(&mut r, 0..4)).collect();
    let pred = w.infer(&x, InferMode::SelfStream).unwrap();
    let acc = pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / 2000.0;
    assert!((acc - 0.25).abs() <= 0.05, "{acc}");
}

#[test]
fn alignment_rows_sum_to_one_and_swap_roles() {
    let w = weights(14, LossWeights::default());
    let mut r = rng(15);
    let (x1, x2) = (images(&mut r, 2), images(&mut r, 2));
    for layer in 0..2 {
        let a = w.alignment_map(&x1, &x2, layer).unwrap();
        let b = w.alignment_map(&x2, &x1, layer).unwrap();
        assert_eq!(a.cross1, b.cross2);
        assert_eq!(a.cross2, b.cross1);
        for row in a.cross1.data().chunks(5).chain(a.cross2.data().chunks(5)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn dominant_orthogonal_keys_give_a_diagonal_map() {
    let mut cfg = small_model();
    cfg.patch.model_dim = 32;
    cfg.patch.head_count = 1;
    let mut w = CadgWeights::init(cfg, LossWeights::default(), &mut rng(16)).unwrap();
    let mut r = rng(17);
    for p in w.params_mut().iter_mut() {
        match p.name.as_str() {
            // Large random positions make the five tokens near-orthogonal
            // after layer norm; scaled identity Q and K make each token's
            // own key dominate its query.
            "embed.position" => p.value = Tensor::randn(&[5, 32], 10.0, &mut r),
            "layer0.attn.query" | "layer0.attn.key" => {
                p.value = Tensor::eye(32).map(|v| 3.0 * v);
            }
            _ => {}
        }
    }
    let x = images(&mut r, 1);
    let map = w.alignment_map(&x, &x, 0).unwrap();
    for m in [&map.cross1, &map.cross2] {
        for q in 0..5 {
            let diag = m.at(&[0, 0, q, q]);
            let off = (0..5).filter(|&k| k != q).map(|k| m.at(&[0, 0, q, k])).fold(0.0, f64::max);
            assert!(diag > 0.9 && diag > 10.0 * off, "row {q}: diag {diag}, off {off}");
        }
    }
}
