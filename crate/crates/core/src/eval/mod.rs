//! Evaluation: word relatedness, feature-norm prediction, lexical-relation
//! probing, context sensitivity, windowed perplexity and the concreteness
//! analyses, with the statistics they rely on.

pub mod analysis;
pub mod benchmarks;
pub mod pls;
pub mod probe;
pub mod represent;
pub mod stats;


use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analysis::{humanlikeness_rank_analysis, per_word_nll_difference, QuintileGroup, QuintileTable, WordDifference};
pub use benchmarks::{
    context_benchmark, feature_benchmark, map_overlap, perplexity, perplexity_report, relatedness_benchmark,
    relation_benchmark, BenchmarkReport, Perplexity, RelatednessResult, REPORT_SCHEMA_VERSION,
};
pub use pls::{pls_fit, PlsModel};
pub use probe::{macro_f1, train_probe, ProbeConfig};
pub use represent::{token_nlls, word_representation, word_representations, WordRepresentation};
pub use stats::{average_ranks, cosine, ols, pearson, spearman, OlsFit};

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("correlation is undefined for constant input")]
    UndefinedCorrelation,
    #[error("{0}")]
    Input(String),
    #[error("tokenizer vocabulary ({tokenizer}) does not match the model vocabulary ({model})")]
    VocabMismatch { tokenizer: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Benchmark settings (the `[eval]` config section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split_seed: u64,
    /// Requested PLS components, capped by the data.
    pub pls_components: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            pls_components: 100,
            probe: ProbeConfig::default(),
        }
    }
}

/// Benchmarks selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    Relatedness,
    Features,
    Relations,
    Context,
    Perplexity,
}

impl Benchmark {
    pub const ALL: [Benchmark; 5] = [
        Self::Relatedness,
        Self::Features,
        Self::Relations,
        Self::Context,
        Self::Perplexity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Relatedness => "relatedness",
            Self::Features => "features",
            Self::Relations => "relations",
            Self::Context => "context",
            Self::Perplexity => "perplexity",
        }
    }
}

impl std::str::FromStr for Benchmark {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|b| b.name()).collect();
            EvalError::Input(format!("unknown benchmark {s:?}; expected one of {}", names.join(", ")))
        })
    }
}
