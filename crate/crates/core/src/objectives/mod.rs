//! Training objectives: next-token prediction, the token-level grounding
//! loss and the vision-language baselines, all expressed over one
//! [`GroundedModel`] whose extra components share the LM's parameter store.

pub mod contrastive;
pub mod flamingo;
pub mod lm;
pub mod voken;


use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use contrastive::{
    clip_sentence_loss, contrastive_positions, lexi_contrastive_loss, matching_scores, GroundingHead, VisualAdapter,
};
pub use flamingo::{Flamingo, FlamingoConfig};
pub use lm::{git_forward, next_token_loss};
pub use voken::{voken_assign, voken_loss, VokenBank, VokenHead};

use crate::data::GroundedBatch;
use crate::model::{Bound, ForwardOptions, ModelConfig, ModelError, ParamId, ParamStore, TokenBatch, TransformerLM};
use crate::tensor::{TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),
    #[error("sequence has no next-token target")]
    NoTarget,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("objective config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

pub(crate) fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
    if store.get(id).shape() != shape {
        return Err(ObjectiveError::Shape(format!(
            "parameter {name} has shape {:?}, expected {shape:?}",
            store.get(id).shape()
        )));
    }
    Ok(id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "language_only")]
    LanguageOnly,
    #[serde(rename = "lcg")]
    Lcg,
    #[serde(rename = "clip")]
    Clip,
    #[serde(rename = "git")]
    Git,
    #[serde(rename = "flamingo")]
    Flamingo,
    #[serde(rename = "vokenization")]
    Vokenization,
    #[serde(rename = "lexivoken")]
    LexiVoken,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 7] = [
        Self::LanguageOnly,
        Self::Lcg,
        Self::Clip,
        Self::Git,
        Self::Flamingo,
        Self::Vokenization,
        Self::LexiVoken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LanguageOnly => "language_only",
            Self::Lcg => "lcg",
            Self::Clip => "clip",
            Self::Git => "git",
            Self::Flamingo => "flamingo",
            Self::Vokenization => "vokenization",
            Self::LexiVoken => "lexivoken",
        }
    }

    pub fn uses_vokens(self) -> bool {
        matches!(self, Self::Vokenization | Self::LexiVoken)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = ObjectiveError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.as_str()).collect();
            ObjectiveError::Config(format!("unknown objective {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    #[serde(rename = "objective")]
    pub kind: ObjectiveKind,
    pub lambda_c: f64,
    /// Weight of the voken loss for the voken objectives.
    pub lambda_v: f64,
    /// Replace the token-level loss with sentence-level CLIP at the top layer.
    pub sentence_clip_top_layer: bool,
    pub flamingo: FlamingoConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Lcg,
            lambda_c: 0.3,
            lambda_v: 1.0,
            sentence_clip_top_layer: false,
            flamingo: FlamingoConfig::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) || !(self.lambda_v >= 0.0 && self.lambda_v.is_finite()) {
            return Err(ObjectiveError::Config("loss weights must be finite and non-negative".into()));
        }
        Flamingo::validate(&self.flamingo)
    }
}

/// Loss components of one step. `l_g = λ_c·l_c + l_l` when both parts are
/// present, and `l_m = l_g + λ_u·l_u` in the mixed scenario.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<'t> {
    pub l_c: Option<Var<'t>>,
    pub l_l: Option<Var<'t>>,
    pub l_v: Option<Var<'t>>,
    pub l_g: Var<'t>,
    pub l_u: Option<Var<'t>>,
    pub l_m: Option<Var<'t>>,
    pub lambda_c: f64,
    pub lambda_u: Option<f64>,
}

/// Scalar values of a [`LossBreakdown`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub l_c: Option<f64>,
    pub l_l: Option<f64>,
    pub l_v: Option<f64>,
    pub l_g: f64,
    pub l_u: Option<f64>,
    pub l_m: Option<f64>,
}

impl LossValues {
    /// The optimized scalar.
    pub fn total(&self) -> f64 {
        self.l_m.unwrap_or(self.l_g)
    }

    pub fn is_finite(&self) -> bool {
        [self.l_c, self.l_l, self.l_v, Some(self.l_g), self.l_u, self.l_m]
            .into_iter()
            .flatten()
            .all(f64::is_finite)
    }
}

impl fmt::Display for LossValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (name, v) in [
            ("L_c", self.l_c),
            ("L_l", self.l_l),
            ("L_v", self.l_v),
            ("L_g", Some(self.l_g)),
            ("L_u", self.l_u),
            ("L_m", self.l_m),
        ] {
            if let Some(v) = v {
                parts.push(format!("{name}={v:.6}"));
            }
        }
        f.write_str(&parts.join(" "))
    }
}

impl<'t> LossBreakdown<'t> {
    /// The variable to differentiate.
    pub fn total(&self) -> Var<'t> {
        self.l_m.unwrap_or(self.l_g)
    }

    pub fn values(&self) -> LossValues {
        LossValues {
            l_c: self.l_c.map(|v| v.item()),
            l_l: self.l_l.map(|v| v.item()),
            l_v: self.l_v.map(|v| v.item()),
            l_g: self.l_g.item(),
            l_u: self.l_u.map(|v| v.item()),
            l_m: self.l_m.map(|v| v.item()),
        }
    }
}

/// `λ_c·L_c + L_l`.
pub fn lcg_combine<'t>(l_c: Var<'t>, l_l: Var<'t>, lambda_c: f64) -> Result<Var<'t>> {
    Ok(l_c.scale(lambda_c).add(l_l)?)
}

/// `L_g + λ_u·L_u`.
pub fn mixed_loss<'t>(l_g: Var<'t>, l_u: Var<'t>, lambda_u: f64) -> Result<Var<'t>> {
    Ok(l_g.add(l_u.scale(lambda_u))?)
}

/// A language model together with whatever components its objective
/// needs. All parameters live in `lm.params`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedModel {
    pub lm: TransformerLM,
    pub objective: ObjectiveConfig,
    pub feature_dim: usize,
    pub adapter: Option<VisualAdapter>,
    pub head: Option<GroundingHead>,
    pub flamingo: Option<Flamingo>,
    pub voken: Option<VokenHead>,
}

struct Parts {
    adapter: bool,
    head: bool,
    flamingo: bool,
    voken: bool,
}

fn parts(kind: ObjectiveKind) -> Parts {
    use ObjectiveKind::*;
    Parts {
        adapter: matches!(kind, Lcg | Clip | Git | Flamingo),
        head: matches!(kind, Lcg | Clip),
        flamingo: kind == Flamingo,
        voken: kind.uses_vokens(),
    }
}

impl GroundedModel {
    /// `n_vokens` is the voken bank size (only read by voken objectives).
    pub fn build(
        config: ModelConfig,
        objective: ObjectiveConfig,
        feature_dim: usize,
        n_vokens: usize,
        seed: u64,
    ) -> Result<Self> {
        objective.validate()?;
        let mut lm = TransformerLM::build(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let p = parts(objective.kind);
        let c = lm.config.clone();
        let d = c.d_model;
        let store = &mut lm.params;
        let adapter = p.adapter.then(|| VisualAdapter::register(store, feature_dim, d, &mut rng));
        let head = p.head.then(|| GroundingHead::register(store, d, &mut rng));
        let flamingo = if p.flamingo {
            Some(Flamingo::register(
                store,
                objective.flamingo,
                d,
                c.d_ffn,
                c.n_heads,
                c.n_layers,
                &mut rng,
            )?)
        } else {
            None
        };
        let voken = if p.voken {
            if n_vokens < 2 {
                return Err(ObjectiveError::Config("voken objectives need a bank of at least 2 images".into()));
            }
            Some(VokenHead::register(store, d, n_vokens, &mut rng))
        } else {
            None
        };
        Ok(Self {
            lm,
            objective,
            feature_dim,
            adapter,
            head,
            flamingo,
            voken,
        })
    }

    /// Re-attaches to a store produced by [`Self::build`] (e.g. a checkpoint).
    pub fn from_params(
        config: ModelConfig,
        objective: ObjectiveConfig,
        feature_dim: usize,
        n_vokens: usize,
        store: ParamStore,
    ) -> Result<Self> {
        objective.validate()?;
        let lm = TransformerLM::from_params(config, store)?;
        let p = parts(objective.kind);
        let c = &lm.config;
        let s = &lm.params;
        let adapter = p
            .adapter
            .then(|| VisualAdapter::attach(s, feature_dim, c.d_model))
            .transpose()?;
        let head = p.head.then(|| GroundingHead::attach(s, c.d_model)).transpose()?;
        let flamingo = p
            .flamingo
            .then(|| Flamingo::attach(s, objective.flamingo, c.d_model, c.d_ffn, c.n_heads, c.n_layers))
            .transpose()?;
        let voken = p.voken.then(|| VokenHead::attach(s, c.d_model, n_vokens)).transpose()?;
        Ok(Self {
            lm,
            objective,
            feature_dim,
            adapter,
            head,
            flamingo,
            voken,
        })
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.objective.kind
    }

    /// Layer read by the voken head.
    pub fn voken_layer(&self) -> usize {
        match self.kind() {
            ObjectiveKind::LexiVoken => 1.min(self.lm.config.n_layers),
            _ => self.lm.config.n_layers,
        }
    }

    fn features<'t>(&self, bound: &Bound<'t>, batch: &GroundedBatch) -> Result<Var<'t>> {
        if batch.feature_dim != self.feature_dim {
            return Err(ObjectiveError::Shape(format!(
                "batch features have dim {}, model expects {}",
                batch.feature_dim, self.feature_dim
            )));
        }
        let tape = bound.vars()[0].tape();
        Ok(tape.constant(vec![batch.len(), batch.feature_dim], batch.features.clone())?)
    }

    fn voken_term<'t>(
        &self,
        bound: &Bound<'t>,
        acts: &crate::model::LayerActivations<'t>,
        tokens: &TokenBatch,
        vokens: Option<&[u32]>,
    ) -> Result<Var<'t>> {
        let head = self.voken.as_ref().expect("voken objective has a voken head");
        let vokens = vokens.ok_or_else(|| ObjectiveError::Config("voken objective needs voken targets".into()))?;
        voken_loss(head, bound, acts.tap(self.voken_layer())?, tokens, vokens)
    }

    /// Loss on a grounded batch. `vokens` holds one voken per position of
    /// `batch.tokens` and is required by the voken objectives only.
    pub fn grounded_loss<'t>(
        &self,
        bound: &Bound<'t>,
        batch: &GroundedBatch,
        vokens: Option<&[u32]>,
    ) -> Result<LossBreakdown<'t>> {
        let tokens = &batch.tokens;
        let lambda_c = self.objective.lambda_c;
        let only = |l_l: Var<'t>| LossBreakdown {
            l_c: None,
            l_l: Some(l_l),
            l_v: None,
            l_g: l_l,
            l_u: None,
            l_m: None,
            lambda_c,
            lambda_u: None,
        };
        let lm = &self.lm;
        match self.kind() {
            ObjectiveKind::LanguageOnly => {
                let fwd = lm.forward(bound, tokens)?;
                Ok(only(next_token_loss(fwd.logits, tokens)?))
            }
            ObjectiveKind::Lcg | ObjectiveKind::Clip => {
                let head = self.head.as_ref().expect("head present");
                let adapter = self.adapter.as_ref().expect("adapter present");
                let features = self.features(bound, batch)?;
                let fwd = lm.forward(bound, tokens)?;
                let sentence = self.kind() == ObjectiveKind::Clip || self.objective.sentence_clip_top_layer;
                let l_c = if sentence {
                    let top = fwd.acts.tap(lm.config.n_layers)?;
                    clip_sentence_loss(head, adapter, bound, features, top, tokens)?
                } else {
                    let reps = fwd.acts.tap(lm.config.grounding_layer)?;
                    let (scores, owner) = matching_scores(head, adapter, bound, features, reps, tokens)?;
                    lexi_contrastive_loss(scores, &owner)?
                };
                if self.kind() == ObjectiveKind::Clip {
                    return Ok(LossBreakdown {
                        l_c: Some(l_c),
                        l_l: None,
                        l_v: None,
                        l_g: l_c,
                        l_u: None,
                        l_m: None,
                        lambda_c: 1.0,
                        lambda_u: None,
                    });
                }
                let l_l = next_token_loss(fwd.logits, tokens)?;
                Ok(LossBreakdown {
                    l_c: Some(l_c),
                    l_l: Some(l_l),
                    l_v: None,
                    l_g: lcg_combine(l_c, l_l, lambda_c)?,
                    l_u: None,
                    l_m: None,
                    lambda_c,
                    lambda_u: None,
                })
            }
            ObjectiveKind::Git => {
                let adapter = self.adapter.as_ref().expect("adapter present");
                let features = self.features(bound, batch)?;
                let (logits, _) = git_forward(lm, adapter, bound, features, tokens)?;
                Ok(only(lm::aligned_token_loss(logits, tokens)?))
            }
            ObjectiveKind::Flamingo => {
                let logits = self.flamingo_logits(bound, batch)?;
                Ok(only(next_token_loss(logits, tokens)?))
            }
            ObjectiveKind::Vokenization | ObjectiveKind::LexiVoken => {
                let fwd = lm.forward(bound, tokens)?;
                let l_v = self.voken_term(bound, &fwd.acts, tokens, vokens)?;
                let l_l = next_token_loss(fwd.logits, tokens)?;
                Ok(LossBreakdown {
                    l_c: None,
                    l_l: Some(l_l),
                    l_v: Some(l_v),
                    l_g: l_l.add(l_v.scale(self.objective.lambda_v))?,
                    l_u: None,
                    l_m: None,
                    lambda_c,
                    lambda_u: None,
                })
            }
        }
    }

    /// Logits of the cross-attention forward pass on a grounded batch.
    pub fn flamingo_logits<'t>(&self, bound: &Bound<'t>, batch: &GroundedBatch) -> Result<Var<'t>> {
        let fl = self
            .flamingo
            .as_ref()
            .ok_or_else(|| ObjectiveError::Config("model has no cross-attention components".into()))?;
        let adapter = self.adapter.as_ref().expect("adapter present");
        let tokens = &batch.tokens;
        let visual = adapter.apply(bound, self.features(bound, batch)?)?;
        let latents = fl.resample(bound, visual, batch.len())?;
        let (b, t) = (tokens.batch, tokens.seq_len);
        let hook = |layer: usize, h: Var<'t>| {
            fl.apply_before(bound, layer, h, latents, b, t)
                .map_err(|e| ModelError::Config(format!("cross-attention: {e}")))
        };
        let fwd = self.lm.forward_with(
            bound,
            tokens,
            ForwardOptions {
                before_block: Some(&hook),
                ..Default::default()
            },
        )?;
        Ok(fwd.logits)
    }

    /// Loss on an ungrounded batch: next-token prediction (plus the voken
    /// term for voken objectives). No visual component is touched.
    pub fn ungrounded_loss<'t>(&self, bound: &Bound<'t>, tokens: &TokenBatch, vokens: Option<&[u32]>) -> Result<Var<'t>> {
        let fwd = self.lm.forward(bound, tokens)?;
        let l = next_token_loss(fwd.logits, tokens)?;
        if self.kind().uses_vokens() {
            let l_v = self.voken_term(bound, &fwd.acts, tokens, vokens)?;
            return Ok(l.add(l_v.scale(self.objective.lambda_v))?);
        }
        Ok(l)
    }

    /// Mixed-scenario step loss `L_m = L_g + λ_u·L_u`.
    pub fn mixed_step_loss<'t>(
        &self,
        bound: &Bound<'t>,
        grounded: &GroundedBatch,
        grounded_vokens: Option<&[u32]>,
        text: &TokenBatch,
        text_vokens: Option<&[u32]>,
        lambda_u: f64,
    ) -> Result<LossBreakdown<'t>> {
        let mut out = self.grounded_loss(bound, grounded, grounded_vokens)?;
        let l_u = self.ungrounded_loss(bound, text, text_vokens)?;
        out.l_m = Some(mixed_loss(out.l_g, l_u, lambda_u)?);
        out.l_u = Some(l_u);
        out.lambda_u = Some(lambda_u);
        Ok(out)
    }
}
