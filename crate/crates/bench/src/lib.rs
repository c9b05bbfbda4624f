//! Deterministic fixtures shared by the benchmarks.

use lcg_core::data::{GroundedBatch, Tokenizer, BOS, EOS, PAD};
use lcg_core::model::{ModelConfig, TokenBatch};
use lcg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Two-layer desk model (d = 64).
pub fn desk_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        ..ModelConfig::desk(vocab_size)
    }
}

/// `n` captions of `len` content tokens with random image features.
pub fn grounded_batch(rng: &mut ChaCha8Rng, n: usize, len: usize, vocab: u32, feature_dim: usize) -> GroundedBatch {
    let seqs: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let mut s = vec![BOS];
            s.extend((0..len).map(|_| rng.random_range(4..vocab)));
            s.push(EOS);
            s
        })
        .collect();
    GroundedBatch {
        tokens: TokenBatch::from_sequences(&seqs, PAD),
        features: (0..n * feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        feature_dim,
    }
}

/// Text over a small vocabulary of made-up words.
pub fn word_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    let lexicon: Vec<String> = (0..200)
        .map(|i| {
            let len = 3 + i % 6;
            (0..len).map(|j| (b'a' + ((i * 7 + j * 3) % 26) as u8) as char).collect()
        })
        .collect();
    let mut s = String::new();
    for k in 0..words {
        s.push_str(&lexicon[rng.random_range(0..lexicon.len())]);
        s.push(if k % 12 == 11 { '\n' } else { ' ' });
    }
    s
}

pub fn tokenizer(rng: &mut ChaCha8Rng, vocab_size: usize) -> Tokenizer {
    Tokenizer::train(&word_text(rng, 20_000), vocab_size).expect("vocabulary above minimum")
}
