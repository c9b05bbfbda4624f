use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::*;
use crate::tensor::{cross_entropy, grad_check_many, Tape};

fn tiny(n_layers: usize, window: Option<usize>) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 23,
        max_seq_len: 12,
        narrow_window: window,
        grounding_layer: 1.min(n_layers.max(1)),
    }
}

fn logits_of(model: &TransformerLM, tokens: &[u32]) -> Vec<f64> {
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    model.forward_tokens(&bound, tokens).unwrap().logits.value().to_vec()
}

fn layer_of(model: &TransformerLM, tokens: &[u32], layer: usize) -> Vec<f64> {
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let f = model.forward_tokens(&bound, tokens).unwrap();
    f.acts.tap(layer).unwrap().value().to_vec()
}

#[test]
fn build_is_deterministic_and_validates() {
    let a = TransformerLM::build(tiny(2, Some(2)), 7).unwrap();
    let b = TransformerLM::build(tiny(2, Some(2)), 7).unwrap();
    assert_eq!(a.params, b.params);
    let c = TransformerLM::build(tiny(2, Some(2)), 8).unwrap();
    assert_ne!(a.params, c.params);

    let mut bad = tiny(2, None);
    bad.n_heads = 3;
    assert!(matches!(TransformerLM::build(bad, 0), Err(ModelError::Config(_))));
    let mut bad = tiny(2, None);
    bad.grounding_layer = 3;
    assert!(TransformerLM::build(bad, 0).is_err());
}

#[test]
fn init_is_truncated_small_normal() {
    let m = TransformerLM::build(ModelConfig::desk(300), 1).unwrap();
    let wte = m.params.get(m.wte());
    assert!(wte.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
    let var = wte.data().iter().map(|v| v * v).sum::<f64>() / wte.numel() as f64;
    // truncation at 2σ shrinks the variance to ≈ 0.774σ²
    assert!((var.sqrt() / INIT_STD - 0.88).abs() < 0.03, "{}", var.sqrt());
}

#[test]
fn output_head_is_the_embedding_table() {
    let mut m = TransformerLM::build(tiny(1, Some(2)), 3).unwrap();
    let tokens = [1, 4, 2];
    let before = logits_of(&m, &tokens);
    let wte = m.wte();
    let delta = 0.5;
    let d = m.config.d_model;
    m.params.get_mut(wte).data_mut()[5 * d..6 * d].iter_mut().for_each(|v| *v += delta);
    let after = logits_of(&m, &tokens);
    // only the last position's logits are checked: token 5 is not in the input,
    // so the hidden states are unchanged and only column 5 moves
    let tape = Tape::new();
    let bound = m.params.bind_frozen(&tape);
    let h = m.forward_tokens(&bound, &tokens).unwrap().acts.tap(1).unwrap().value().to_vec();
    let v = m.config.vocab_size;
    for p in 0..3 {
        let shift: f64 = h[p * d..(p + 1) * d].iter().sum::<f64>() * delta;
        for c in 0..v {
            let diff = after[p * v + c] - before[p * v + c];
            if c == 5 {
                assert!((diff - shift).abs() < 1e-12);
            } else {
                assert_eq!(diff, 0.0);
            }
        }
    }
}

fn independent_count(layers: usize, d: usize, ffn: usize, vocab: usize, ctx: usize) -> usize {
    let attention = 4 * d * d + 4 * d;
    let mlp = d * ffn + ffn + ffn * d + d;
    let norms = 4 * d;
    let embeddings = vocab * d + ctx * d;
    embeddings + layers * (attention + mlp + norms) + if layers > 0 { 2 * d } else { 0 }
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [tiny(0, None), tiny(2, Some(2)), ModelConfig::desk(512)] {
        let m = TransformerLM::build(cfg.clone(), 0).unwrap();
        let want = independent_count(cfg.n_layers, cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.max_seq_len);
        assert_eq!(m.params.num_params(), want);
        assert_eq!(cfg.param_count(), want);
    }
    let full = ModelConfig::full_scale();
    let n = full.param_count();
    assert_eq!(n, independent_count(6, 768, 3072, 30_522, 128));
    assert!((60_000_000..80_000_000).contains(&n), "{n}");
}

#[test]
fn attention_mask_rules() {
    assert_eq!(attention_mask(1, Some(2)), vec![true]);
    assert_eq!(attention_mask(1, None), vec![true]);
    let m = attention_mask(8, Some(2));
    let allowed: Vec<usize> = (0..8).filter(|&k| m[5 * 8 + k]).collect();
    assert_eq!(allowed, vec![3, 4, 5]);
    let full = attention_mask(4, None);
    for q in 0..4 {
        for k in 0..4 {
            assert_eq!(full[q * 4 + k], k <= q);
        }
    }
}

#[test]
fn causality_and_narrow_locality_are_exact() {
    let m = TransformerLM::build(tiny(3, Some(2)), 11).unwrap();
    let v = m.config.vocab_size as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let len = rng.random_range(4..=12);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..v)).collect();
        let t = rng.random_range(0..len);
        let mut perturbed = tokens.clone();
        perturbed[t] = (tokens[t] + 1 + rng.random_range(0..v - 1)) % v;
        let (a, b) = (logits_of(&m, &tokens), logits_of(&m, &perturbed));
        let vs = m.config.vocab_size;
        assert_eq!(a[..t * vs], b[..t * vs]);
        let (h, hp) = (layer_of(&m, &tokens, 1), layer_of(&m, &perturbed, 1));
        let d = m.config.d_model;
        for p in 0..len {
            if t + 2 < p || t > p {
                assert_eq!(h[p * d..(p + 1) * d], hp[p * d..(p + 1) * d], "p={p} t={t}");
            }
        }
    }
}

#[test]
fn zero_layer_logits_are_embedding_products() {
    let m = TransformerLM::build(tiny(0, None), 2).unwrap();
    let tokens = [3u32, 0, 7];
    let got = logits_of(&m, &tokens);
    let e = m.params.get(m.wte());
    let p = m.params.get(m.wpe());
    let (d, v) = (16, 23);
    for (pos, &tok) in tokens.iter().enumerate() {
        let h: Vec<f64> = (0..d).map(|j| e.row(tok as usize)[j] + p.row(pos)[j]).collect();
        for c in 0..v {
            let want: f64 = (0..d).map(|j| h[j] * e.row(c)[j]).sum();
            assert!((got[pos * v + c] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn taps_cover_every_layer() {
    let m = TransformerLM::build(tiny(3, Some(2)), 4).unwrap();
    let tape = Tape::new();
    let bound = m.params.bind_frozen(&tape);
    let f = m.forward_tokens(&bound, &[1, 2, 3]).unwrap();
    assert_eq!(f.acts.n_layers(), 3);
    assert_eq!(f.acts.tap(1).unwrap().id(), f.acts.layers[1].id());
    for l in 0..=3 {
        assert_eq!(f.acts.tap(l).unwrap().shape(), vec![3, 16]);
    }
    assert!(matches!(f.acts.tap(4), Err(ModelError::LayerOutOfRange { layer: 4, .. })));
    // logits are h_n · Eᵀ
    let h = f.acts.tap(3).unwrap().value();
    let e = m.params.get(m.wte());
    let want: f64 = (0..16).map(|j| h[j] * e.row(9)[j]).sum();
    assert!((f.logits.value()[9] - want).abs() < 1e-14);
}

#[test]
fn over_long_sequence_is_rejected() {
    let m = TransformerLM::build(tiny(1, None), 0).unwrap();
    let tape = Tape::new();
    let bound = m.params.bind(&tape);
    let err = m.forward_tokens(&bound, &[1; 13]).unwrap_err();
    assert!(matches!(err, ModelError::SequenceTooLong { len: 13, max: 12 }));
}

#[test]
fn padding_does_not_change_real_positions() {
    let m = TransformerLM::build(tiny(2, Some(2)), 5).unwrap();
    let short = vec![1u32, 5, 6];
    let long = vec![1u32, 5, 6, 7, 8];
    let batch = TokenBatch::from_sequences(&[short.clone(), long], 0);
    let tape = Tape::new();
    let bound = m.params.bind_frozen(&tape);
    let f = m.forward(&bound, &batch).unwrap();
    let v = m.config.vocab_size;
    let alone = logits_of(&m, &short);
    let batched = f.logits.value();
    for i in 0..3 * v {
        assert!((alone[i] - batched[i]).abs() < 1e-13);
    }
}

fn next_token_ce<'t>(m: &TransformerLM, bound: &Bound<'t>, tokens: &[u32]) -> Var<'t> {
    let f = m.forward_tokens(bound, tokens).unwrap();
    let rows: Vec<usize> = (0..tokens.len() - 1).collect();
    let logits = f.logits.gather_rows(&rows).unwrap();
    cross_entropy(logits, &tokens[1..], &vec![true; tokens.len() - 1]).unwrap().loss
}

#[test]
fn tied_gradient_equals_untied_twin_sum() {
    let m = TransformerLM::build(tiny(2, Some(2)), 9).unwrap();
    let tokens = [1u32, 4, 9, 4, 2, 17];
    let tape = Tape::new();
    let bound = m.params.bind(&tape);
    let loss = next_token_ce(&m, &bound, &tokens);
    let tied = tape.backward(loss).unwrap().get(bound.var(m.wte())).unwrap().to_vec();

    let tape = Tape::new();
    let bound = m.params.bind(&tape);
    let head = tape.param(m.params.get(m.wte()));
    let f = m
        .forward_with(
            &bound,
            &TokenBatch::single(&tokens),
            ForwardOptions {
                output_weight: Some(head),
                ..Default::default()
            },
        )
        .unwrap();
    let rows: Vec<usize> = (0..5).collect();
    let loss = cross_entropy(f.logits.gather_rows(&rows).unwrap(), &tokens[1..], &[true; 5])
        .unwrap()
        .loss;
    let g = tape.backward(loss).unwrap();
    let (ge, gh) = (g.get(bound.var(m.wte())).unwrap(), g.get(head).unwrap());
    for i in 0..tied.len() {
        assert!((tied[i] - (ge[i] + gh[i])).abs() <= 1e-10);
    }
}

#[test]
fn full_model_passes_grad_check() {
    let m = TransformerLM::build(tiny(2, Some(2)), 13).unwrap();
    let tensors: Vec<Tensor> = m.params.iter().map(|(_, t)| t.clone()).collect();
    let tokens = [1u32, 7, 3, 3, 20, 2];
    let err = grad_check_many(
        |_, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            Ok(next_token_ce(&m, &bound, &tokens))
        },
        &tensors,
        1e-5,
        Some(64),
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn checkpoint_round_trip_is_byte_and_forward_exact() {
    let m = TransformerLM::build(tiny(2, Some(2)), 21).unwrap();
    let ck = Checkpoint::from_store(&m.params, "{\"k\":1}".into(), vec![1, 2, 3]);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"LCGC");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.meta, "{\"k\":1}");
    let m2 = TransformerLM::from_params(m.config.clone(), back.into_store()).unwrap();
    let toks = [1u32, 2, 3, 4];
    let (a, b) = (logits_of(&m, &toks), logits_of(&m2, &toks));
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(Checkpoint::from_bytes(&corrupt).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
}
