//! Per-layer word vectors and per-token log-likelihoods.

use super::{EvalError, Result};
use crate::data::{Tokenizer, BOS, UNK};
use crate::model::{TokenBatch, TransformerLM};
use crate::tensor::Tape;

/// A word's vector at every layer `0..=n_layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordRepresentation {
    pub word: String,
    pub layers: Vec<Vec<f64>>,
}

const BATCH: usize = 64;

/// Representations of `words`, each run in isolation as `[BOS, tokens…]`
/// and read at its final token. Words that encode to nothing or to the
/// unknown token yield `None`.
pub fn word_representations(model: &TransformerLM, tok: &Tokenizer, words: &[String]) -> Result<Vec<Option<WordRepresentation>>> {
    let mut out: Vec<Option<WordRepresentation>> = vec![None; words.len()];
    let mut seqs = Vec::new();
    let mut owners = Vec::new();
    for (i, w) in words.iter().enumerate() {
        let ids = tok.encode_word(w);
        if ids.is_empty() || ids.contains(&UNK) || ids.len() + 1 > model.config.max_seq_len {
            continue;
        }
        let mut s = vec![BOS];
        s.extend(ids);
        seqs.push(s);
        owners.push(i);
    }
    let d = model.config.d_model;
    let n_layers = model.config.n_layers;
    for (chunk, own) in seqs.chunks(BATCH).zip(owners.chunks(BATCH)) {
        let batch = TokenBatch::from_sequences(chunk, crate::data::PAD);
        let tape = Tape::new();
        let bound = model.params.bind_frozen(&tape);
        let fwd = model.forward(&bound, &batch)?;
        let taps: Vec<_> = (0..=n_layers)
            .map(|l| fwd.acts.tap(l).map(|v| v.value()))
            .collect::<std::result::Result<_, _>>()?;
        for (b, (s, &i)) in chunk.iter().zip(own).enumerate() {
            let row = b * batch.seq_len + s.len() - 1;
            out[i] = Some(WordRepresentation {
                word: words[i].clone(),
                layers: taps.iter().map(|t| t[row * d..(row + 1) * d].to_vec()).collect(),
            });
        }
    }
    Ok(out)
}

pub fn word_representation(model: &TransformerLM, tok: &Tokenizer, word: &str) -> Result<WordRepresentation> {
    word_representations(model, tok, &[word.to_string()])?
        .pop()
        .flatten()
        .ok_or_else(|| EvalError::Input(format!("word {word:?} has no usable tokenization")))
}

/// `nll[p]` = −log p(token p | tokens before p) for `p ≥ 1`; `nll[0] = 0`.
/// Each sequence must fit the model context.
pub fn token_nlls(model: &TransformerLM, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
    let v = model.config.vocab_size;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(BATCH / 2) {
        let batch = TokenBatch::from_sequences(chunk, crate::data::PAD);
        let tape = Tape::new();
        let bound = model.params.bind_frozen(&tape);
        let logits = model.forward(&bound, &batch)?.logits.value();
        for (b, s) in chunk.iter().enumerate() {
            let mut nll = vec![0.0; s.len()];
            for p in 1..s.len() {
                let r = b * batch.seq_len + p - 1;
                let row = &logits[r * v..(r + 1) * v];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                nll[p] = lse - row[s[p] as usize];
            }
            out.push(nll);
        }
    }
    Ok(out)
}
