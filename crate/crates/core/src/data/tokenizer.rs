//! Byte-level BPE with a word-initial space marker.
//!
//! Text is split on whitespace and every word is encoded as `" " + word`,
//! so a word tokenizes identically in isolation and inside a sentence.
//! Decoding concatenates the pieces and drops the leading space.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const BYTE_OFFSET: u32 = 4;
pub const MIN_VOCAB: usize = 256 + BYTE_OFFSET as usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    vocab_size: usize,
    merges: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
    merges: Vec<(u32, u32)>,
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), usize>,
}

impl Tokenizer {
    /// Learns merges until the vocabulary holds `vocab_size` ids or no pair
    /// is left. Ties in pair frequency go to the lexicographically smallest
    /// `(left bytes, right bytes)`.
    pub fn train(corpus: &str, vocab_size: usize) -> Result<Self, DataError> {
        if vocab_size < MIN_VOCAB {
            return Err(DataError::VocabTooSmall {
                requested: vocab_size,
                min: MIN_VOCAB,
            });
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in corpus.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let mut words: Vec<(Vec<u32>, usize)> = counts
            .into_iter()
            .map(|(w, c)| (word_bytes(w).map(|b| b as u32 + BYTE_OFFSET).collect(), c))
            .collect();
        words.sort();

        let mut pieces = base_pieces();
        let mut merges = Vec::new();
        while pieces.len() < vocab_size {
            let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                    let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
            let Some(((a, b), _)) = best else { break };
            let new_id = pieces.len() as u32;
            let mut merged = pieces[a as usize].clone();
            merged.extend_from_slice(&pieces[b as usize]);
            pieces.push(merged);
            merges.push((a, b));
            for (w, _) in &mut words {
                *w = apply_merge(w, (a, b), new_id);
            }
        }
        Ok(Self::from_merges(vocab_size, merges))
    }

    fn from_merges(vocab_size: usize, merges: Vec<(u32, u32)>) -> Self {
        let mut pieces = base_pieces();
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let mut merged = pieces[a as usize].clone();
            merged.extend_from_slice(&pieces[b as usize]);
            pieces.push(merged);
            ranks.insert((a, b), rank);
        }
        Self {
            vocab_size,
            merges,
            pieces,
            ranks,
        }
    }

    /// Declared vocabulary size; ids beyond the learned merges are never
    /// produced by [`Self::encode`].
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().flat_map(|w| self.encode_word(w)).collect()
    }

    /// Tokens of a single whitespace-free word.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = word_bytes(word).map(|b| b as u32 + BYTE_OFFSET).collect();
        loop {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0], p[1])).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let pair = self.merges[rank];
            ids = apply_merge(&ids, pair, BYTE_OFFSET + 256 + rank as u32);
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, DataError> {
        let mut bytes = Vec::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS | UNK => {}
                _ => bytes.extend_from_slice(
                    self.pieces
                        .get(id as usize)
                        .ok_or(DataError::UnknownToken(id))?,
                ),
            }
        }
        let s = String::from_utf8(bytes).map_err(|e| DataError::Format(format!("decoded bytes not UTF-8: {e}")))?;
        Ok(s.strip_prefix(' ').map(str::to_string).unwrap_or(s))
    }

    /// Whether `id` begins a new word (its piece starts with the space marker).
    pub fn starts_word(&self, id: u32) -> bool {
        self.piece(id).is_some_and(|p| p.first() == Some(&b' '))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TokenizerFile {
            version: 1,
            vocab_size: self.vocab_size,
            merges: self.merges.clone(),
        })
        .expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        let f: TokenizerFile = serde_json::from_str(s).map_err(|e| DataError::Format(format!("tokenizer: {e}")))?;
        if f.version != 1 {
            return Err(DataError::Format(format!("tokenizer version {}", f.version)));
        }
        if f.vocab_size < MIN_VOCAB || MIN_VOCAB + f.merges.len() > f.vocab_size {
            return Err(DataError::Format("tokenizer vocab size inconsistent with merges".into()));
        }
        for (i, &(a, b)) in f.merges.iter().enumerate() {
            let bound = (MIN_VOCAB + i) as u32;
            if a < BYTE_OFFSET || b < BYTE_OFFSET || a >= bound || b >= bound {
                return Err(DataError::Format(format!("merge {i} references undefined id")));
            }
        }
        Ok(Self::from_merges(f.vocab_size, f.merges))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let s = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&s)
    }
}

fn word_bytes(w: &str) -> impl Iterator<Item = u8> + '_ {
    std::iter::once(b' ').chain(w.bytes())
}

fn base_pieces() -> Vec<Vec<u8>> {
    let mut pieces: Vec<Vec<u8>> = vec![Vec::new(); BYTE_OFFSET as usize];
    pieces.extend((0..=255u8).map(|b| vec![b]));
    pieces
}

fn apply_merge(ids: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}
