//! Tokenization, on-disk dataset formats, batch sampling and the synthetic
//! grounded world used by the tests and the desk-scale experiments.

pub mod batch;
pub mod formats;
pub mod synth;
pub mod tokenizer;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use batch::{EpochSampler, GroundedBatch, MixedSampler, SamplerState};
pub use formats::{
    load_grounded, read_features, write_features, ContextPair, GroundedDataset, GroundedExample, Relation,
    RelationLabel, TextDataset, TEXT_SEQ_LEN,
};
pub use synth::{gen_synthetic, SyntheticCorpus, World, WorldConfig};
pub use tokenizer::{Tokenizer, BOS, EOS, MIN_VOCAB, PAD, UNK};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary size {requested} below minimum {min}")]
    VocabTooSmall { requested: usize, min: usize },
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("{file}:{line}: {msg}")]
    Record { file: String, line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid synthetic world: {0}")]
    World(String),
    #[error("empty dataset: {0}")]
    Empty(&'static str),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn record(file: &Path, line: usize, msg: impl Into<String>) -> Self {
        Self::Record {
            file: file.display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}
