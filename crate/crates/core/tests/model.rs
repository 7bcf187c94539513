use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniark::model::{
    adapter_forward, init_model, insert_adapters, trainable_parameters, AdapterPlacement,
    ModelConfig, ModelState, ParamGroup, TrainableSet,
};
use uniark::numeric::{gelu, Graph, Tensor};

fn config(adapter_dim: usize, tie: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        max_seq_len: 10,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        ffn_width: 24,
        adapter_dim,
        adapter_placement: AdapterPlacement::Both,
        tie_embeddings: tie,
        mask_token_id: 1,
        pad_token_id: 0,
    }
}

/// Hand count: embeddings, per-layer attention/FFN/LayerNorm blocks, head.
fn closed_form_count(c: &ModelConfig) -> usize {
    let (v, d, f, l) = (c.vocab_size, c.d_model, c.ffn_width, c.n_layers);
    let embeddings = v * d + c.max_seq_len * d + 2 * d;
    let attention = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let norms = 4 * d;
    let head = if c.tie_embeddings { 0 } else { d * v } + v;
    let adapters = l * c.adapter_placement.sublayers() * 2 * d * c.adapter_dim;
    embeddings + l * (attention + ffn + norms) + head + adapters
}

fn random_prompt(rng: &mut ChaCha8Rng, c: &ModelConfig) -> (Vec<usize>, Vec<usize>) {
    let n = rng.gen_range(2..=c.max_seq_len);
    let tokens = (0..n).map(|_| rng.gen_range(2..c.vocab_size)).collect();
    let pos = rng.gen_range(0..n);
    (tokens, vec![pos])
}

fn perturb_adapters(state: &mut ModelState, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut state.params.layers {
        for ad in [&mut layer.attn_adapter, &mut layer.ffn_adapter]
            .into_iter()
            .flatten()
        {
            for x in ad.up.data_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    for (k, tie) in [(0, false), (0, true), (4, false), (8, true)] {
        let c = config(k, tie);
        let state = init_model(&c, 5).unwrap();
        assert_eq!(
            state.parameter_count(),
            closed_form_count(&c),
            "k={k} tie={tie}"
        );
    }
    for placement in [AdapterPlacement::Attn, AdapterPlacement::Ffn] {
        let c = ModelConfig {
            adapter_placement: placement,
            ..config(4, false)
        };
        assert_eq!(
            init_model(&c, 5).unwrap().parameter_count(),
            closed_form_count(&c)
        );
    }
}

#[test]
fn same_seed_same_state() {
    let c = config(4, false);
    assert_eq!(init_model(&c, 9).unwrap(), init_model(&c, 9).unwrap());
    assert_ne!(init_model(&c, 9).unwrap(), init_model(&c, 10).unwrap());
}

#[test]
fn adapter_parameter_count() {
    let base = init_model(&config(0, false), 3).unwrap();
    let adapted = insert_adapters(base.clone(), 4, 4).unwrap();
    let extra: usize = adapted
        .named_parameters()
        .iter()
        .filter(|(_, g, _)| *g == ParamGroup::Adapter)
        .map(|(_, _, t)| t.numel())
        .sum();
    assert_eq!(extra, 2 * 2 * (16 * 4 + 4 * 16));
    assert_eq!(adapted.parameter_count(), base.parameter_count() + extra);
}

#[test]
fn adapter_forward_hand_value() {
    let h = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    let down = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    let up = Tensor::matrix(1, 1, vec![2.0]).unwrap();
    let mut g = Graph::new();
    let (hv, dv, uv) = (g.constant(h), g.constant(down), g.constant(up));
    let out = adapter_forward(&mut g, hv, dv, uv).unwrap();
    let expected = 2.0 * gelu(&Tensor::scalar(1.0)).data()[0] + 1.0;
    assert!((g.value(out)[0] - expected).abs() < 1e-12);
}

#[test]
fn adapter_forward_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rand = |rng: &mut ChaCha8Rng, r, c| {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let h = rand(&mut rng, 3, 64);
    let down = rand(&mut rng, 64, 16);
    let up = rand(&mut rng, 16, 64);
    let mut g = Graph::new();
    let (hv, dv, uv) = (
        g.constant(h.clone()),
        g.constant(down.clone()),
        g.constant(up),
    );
    let out = adapter_forward(&mut g, hv, dv, uv).unwrap();
    assert_eq!(g.shape(out), &[3, 64]);

    let zero = g.constant(Tensor::zeros(&[16, 64]));
    let out = adapter_forward(&mut g, hv, dv, zero).unwrap();
    assert_eq!(g.value(out), h.data());

    let wrong = g.constant(Tensor::zeros(&[16, 32]));
    assert!(adapter_forward(&mut g, hv, dv, wrong).is_err());
}

#[test]
fn two_positions_two_logit_rows() {
    let state = init_model(&config(0, false), 1).unwrap();
    let logits = state.forward_mlm(&[2, 3, 1, 4, 1], &[2, 4]).unwrap();
    assert_eq!(logits.shape(), &[2, 30]);
    assert!(logits.all_finite());
    assert!(state.forward_mlm(&[2, 3], &[2]).is_err());
    assert!(state.forward_mlm(&[2; 11], &[0]).is_err());
}

#[test]
fn trailing_padding_is_invisible() {
    let state = init_model(&config(0, false), 1).unwrap();
    let plain = state.forward_mlm(&[5, 1, 7, 8], &[1, 3]).unwrap();
    let padded = state.forward_mlm(&[5, 1, 7, 8, 0, 0, 0], &[1, 3]).unwrap();
    for (a, b) in plain.data().iter().zip(padded.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn insertion_is_identity_and_trained_adapters_are_not() {
    let c = config(0, false);
    let base = init_model(&c, 1).unwrap();
    let adapted = insert_adapters(base.clone(), 4, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (tokens, pos) = random_prompt(&mut rng, &c);
        let a = base.forward_mlm(&tokens, &pos).unwrap();
        let b = adapted.forward_mlm(&tokens, &pos).unwrap();
        assert_eq!(a.data(), b.data());
    }
    let mut trained = adapted;
    perturb_adapters(&mut trained, 4);
    let a = base.forward_mlm(&[3, 1, 4], &[1]).unwrap();
    let b = trained.forward_mlm(&[3, 1, 4], &[1]).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn trainable_sets() {
    let base = init_model(&config(0, false), 1).unwrap();
    assert!(trainable_parameters(&base, TrainableSet::None)
        .unwrap()
        .is_empty());
    assert!(trainable_parameters(&base, TrainableSet::Adapter).is_err());
    let all: Vec<String> = base
        .named_parameters()
        .into_iter()
        .map(|(n, _, _)| n)
        .collect();
    assert_eq!(
        trainable_parameters(&base, TrainableSet::Finetune).unwrap(),
        all
    );

    let adapted = insert_adapters(base.clone(), 4, 2).unwrap();
    let adapter_names: Vec<String> = adapted
        .named_parameters()
        .into_iter()
        .filter(|(n, _, _)| !all.contains(n))
        .map(|(n, _, _)| n)
        .collect();
    assert_eq!(adapter_names.len(), 2 * 2 * 2);
    assert_eq!(
        trainable_parameters(&adapted, TrainableSet::Adapter).unwrap(),
        adapter_names
    );
    assert!(insert_adapters(adapted, 4, 2).is_err());
    assert!(insert_adapters(base, 16, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_finite_and_deterministic(seed in 0u64..1000, tokens in prop::collection::vec(0usize..30, 1..10)) {
        let state = init_model(&config(4, false), seed).unwrap();
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let a = state.forward_mlm(&tokens, &pos).unwrap();
        let b = state.forward_mlm(&tokens, &pos).unwrap();
        prop_assert!(a.all_finite());
        prop_assert_eq!(a, b);
    }
}
