//! Named variants of the grounding objective.

use std::fmt;
use std::str::FromStr;

use super::{ExperimentConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// λ_c = 0.1.
    LessGrounding,
    /// λ_c = 1.0.
    MoreGrounding,
    /// Ordinary causal attention in the first layer.
    NoNarrowAtt,
    /// Grounding loss on the third layer (the top layer of shallower
    /// models).
    MidGrounding,
    /// Sentence-level CLIP at the top layer instead of the token loss.
    SentenceClip,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Self::LessGrounding,
        Self::MoreGrounding,
        Self::NoNarrowAtt,
        Self::MidGrounding,
        Self::SentenceClip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LessGrounding => "less_grounding",
            Self::MoreGrounding => "more_grounding",
            Self::NoNarrowAtt => "no_narrow_att",
            Self::MidGrounding => "mid_grounding",
            Self::SentenceClip => "sentence_clip",
        }
    }

    pub fn apply(self, c: &mut ExperimentConfig) {
        match self {
            Self::LessGrounding => c.objective.lambda_c = 0.1,
            Self::MoreGrounding => c.objective.lambda_c = 1.0,
            Self::NoNarrowAtt => c.model.narrow_window = None,
            Self::MidGrounding => c.model.grounding_layer = 3.min(c.model.n_layers.max(1)),
            Self::SentenceClip => c.objective.sentence_clip_top_layer = true,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        ablation_config(s)
    }
}

/// Looks up an ablation by name.
pub fn ablation_config(name: &str) -> Result<Ablation, TrainError> {
    Ablation::ALL.into_iter().find(|a| a.name() == name).ok_or_else(|| {
        let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
        TrainError::Config(format!("unknown ablation {name:?}; valid names: {}", names.join(", ")))
    })
}
