//! Experiment configuration: the TOML file with `[model]`, `[objective]`,
//! `[train]`, `[data]` and `[eval]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Result, TrainError};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::objectives::{ObjectiveConfig, ObjectiveKind};

/// Default λ_u candidates.
pub const LAMBDA_U_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
/// Narrow window used by the objectives that ground the first layer.
pub const DEFAULT_NARROW_WINDOW: usize = 2;

fn default_grid() -> Vec<f64> {
    LAMBDA_U_GRID.to_vec()
}
fn default_peak_lr() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    10
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1.0
}
fn default_matcher_epochs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_grid")]
    pub lambda_u_grid: Vec<f64>,
    /// λ_u of a single mixed run; the smallest grid value when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_u: Option<f64>,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    /// `max(100, total_steps / 20)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    /// Grounded batch size; 32, or 128 for CLIP, when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Ungrounded chunks per step; chosen so both streams finish an epoch
    /// together when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_batch_size: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Epochs of the matching model that assigns vokens.
    #[serde(default = "default_matcher_epochs")]
    pub matcher_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            lambda_u_grid: default_grid(),
            lambda_u: None,
            peak_lr: default_peak_lr(),
            warmup_steps: None,
            batch_size: None,
            text_batch_size: None,
            epochs: default_epochs(),
            weight_decay: default_weight_decay(),
            betas: default_betas(),
            eps: default_eps(),
            grad_clip: default_clip(),
            matcher_epochs: default_matcher_epochs(),
            seed,
        }
    }

    /// Full-scale settings: 5000 warmup steps, batch 128.
    pub fn full_scale(seed: u64, epochs: usize) -> Self {
        Self {
            warmup_steps: Some(5000),
            batch_size: Some(128),
            epochs,
            ..Self::new(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if self.lambda_u_grid.is_empty() || !self.lambda_u_grid.iter().all(|&x| nonneg(x)) {
            return bad("lambda_u_grid must be a non-empty list of non-negative weights");
        }
        if self.lambda_u.is_some_and(|x| !nonneg(x)) {
            return bad("lambda_u must be non-negative");
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad("peak_lr must be positive");
        }
        if self.warmup_steps == Some(0) {
            return bad("warmup_steps must be at least 1");
        }
        if self.batch_size == Some(0) || self.text_batch_size == Some(0) {
            return bad("batch sizes must be positive");
        }
        if !nonneg(self.weight_decay) || !nonneg(self.eps) || !(self.grad_clip > 0.0) {
            return bad("weight_decay and eps must be non-negative and grad_clip positive");
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn grounded_batch_size(&self, kind: ObjectiveKind) -> usize {
        self.batch_size
            .unwrap_or(if kind == ObjectiveKind::Clip { 128 } else { 32 })
    }

    pub fn warmup_for(&self, total_steps: u64) -> u64 {
        self.warmup_steps.unwrap_or_else(|| (total_steps / 20).max(100))
    }

    pub fn mixed_lambda_u(&self) -> f64 {
        self.lambda_u
            .unwrap_or_else(|| self.lambda_u_grid.iter().copied().fold(f64::INFINITY, f64::min))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Captions only.
    Grounded,
    /// Captions plus ungrounded text, mixed by λ_u.
    Mixed,
}

fn default_tokenizer() -> PathBuf {
    PathBuf::from("tokenizer.json")
}

/// Where the data lives. Relative paths are resolved against the config
/// file's directory; `tokenizer` is relative to `dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    #[serde(default = "default_tokenizer")]
    pub tokenizer: PathBuf,
    pub scenario: Scenario,
    /// Keep captions until this many grounded tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grounded_tokens: Option<usize>,
    /// Keep text chunks until this many ungrounded tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_text_tokens: Option<usize>,
}

impl DataConfig {
    pub fn new(dir: impl Into<PathBuf>, scenario: Scenario) -> Self {
        Self {
            dir: dir.into(),
            tokenizer: default_tokenizer(),
            scenario,
            max_grounded_tokens: None,
            max_text_tokens: None,
        }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.dir.join(&self.tokenizer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Desk defaults for `kind`: narrow first-layer attention only for the
    /// objectives that ground at layer 1.
    pub fn preset(kind: ObjectiveKind, model: ModelConfig, data: DataConfig, seed: u64) -> Self {
        let mut c = Self {
            model,
            objective: ObjectiveConfig::new(kind),
            train: TrainConfig::new(seed),
            data,
            eval: EvalConfig::default(),
        };
        c.set_objective(kind);
        c
    }

    /// Switches the objective kind and its attention preset.
    pub fn set_objective(&mut self, kind: ObjectiveKind) {
        self.objective.kind = kind;
        self.model.narrow_window = matches!(kind, ObjectiveKind::Lcg | ObjectiveKind::LexiVoken)
            .then_some(DEFAULT_NARROW_WINDOW);
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        if c.data.dir.is_relative() {
            c.data.dir = base.join(&c.data.dir);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.train.validate()
    }

    /// SHA-256 over the canonical JSON form, excluding data paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data.dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
