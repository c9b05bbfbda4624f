//! Epoch-wise shuffled sampling and the dual grounded/ungrounded batch stream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::formats::{GroundedDataset, TextDataset};
use super::tokenizer::PAD;
use super::DataError;
use crate::model::TokenBatch;

/// `n` padded captions with their image features (`n × feature_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedBatch {
    pub tokens: TokenBatch,
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl GroundedBatch {
    pub fn from_indices(ds: &GroundedDataset, idx: &[usize]) -> Result<Self, DataError> {
        if idx.is_empty() {
            return Err(DataError::Empty("grounded batch"));
        }
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| ds.examples[i].tokens.as_slice()).collect();
        let tokens = TokenBatch::from_sequences(&seqs, PAD);
        let dim = ds.features.dim;
        let mut features = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            features.extend_from_slice(ds.features.row(ds.examples[i].feature_row));
        }
        Ok(Self {
            tokens,
            features,
            feature_dim: dim,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.batch
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.batch == 0
    }
}

/// Position of an [`EpochSampler`]; enough to resume the exact stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub pos: usize,
}

/// Draws fixed-size batches of indices; every index appears once per epoch
/// and the final partial batch is dropped. The shuffle of epoch `e` depends
/// only on `(seed, stream, e)`.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
    stream: u64,
    state: SamplerState,
    order: Vec<usize>,
}

impl EpochSampler {
    /// `batch_size` is clamped to `len` so tiny datasets still yield batches.
    pub fn new(len: usize, batch_size: usize, seed: u64, stream: u64) -> Result<Self, DataError> {
        if len == 0 {
            return Err(DataError::Empty("sampler over empty dataset"));
        }
        if batch_size == 0 {
            return Err(DataError::Format("batch size must be positive".into()));
        }
        let mut s = Self {
            len,
            batch_size: batch_size.min(len),
            seed,
            stream,
            state: SamplerState { epoch: 0, pos: 0 },
            order: Vec::new(),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.state.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(self.stream);
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng);
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn set_state(&mut self, state: SamplerState) {
        let reshuffle = state.epoch != self.state.epoch;
        self.state = state;
        if reshuffle {
            self.reshuffle();
        }
    }

    /// Next batch and whether it is the last full batch of its epoch.
    pub fn next_batch(&mut self) -> (Vec<usize>, bool) {
        if self.state.pos + self.batch_size > self.len {
            self.state = SamplerState {
                epoch: self.state.epoch + 1,
                pos: 0,
            };
            self.reshuffle();
        }
        let b = self.order[self.state.pos..self.state.pos + self.batch_size].to_vec();
        self.state.pos += self.batch_size;
        let last = self.state.pos + self.batch_size > self.len;
        (b, last)
    }
}

/// One grounded and one ungrounded batch per step, each cycled
/// independently.
#[derive(Debug, Clone)]
pub struct MixedSampler {
    pub grounded: EpochSampler,
    pub text: EpochSampler,
}

impl MixedSampler {
    pub fn new(
        grounded: &GroundedDataset,
        text: &TextDataset,
        grounded_batch: usize,
        text_batch: usize,
        seed: u64,
    ) -> Result<Self, DataError> {
        Ok(Self {
            grounded: EpochSampler::new(grounded.len(), grounded_batch, seed, 1)?,
            text: EpochSampler::new(text.len(), text_batch, seed, 2)?,
        })
    }

    pub fn next_mixed_batch(
        &mut self,
        grounded: &GroundedDataset,
        text: &TextDataset,
    ) -> Result<(GroundedBatch, TokenBatch), DataError> {
        let (gi, _) = self.grounded.next_batch();
        let (ti, _) = self.text.next_batch();
        let g = GroundedBatch::from_indices(grounded, &gi)?;
        let seqs: Vec<&[u32]> = ti.iter().map(|&i| text.chunks[i].as_slice()).collect();
        Ok((g, TokenBatch::from_sequences(&seqs, PAD)))
    }
}
