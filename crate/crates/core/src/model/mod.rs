//! GPT-style causal decoder with tied input/output embeddings, per-layer
//! activation taps and an optional narrow attention window on layer 1.

pub mod checkpoint;
mod params;

#[cfg(test)]
mod tests;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use params::{truncated_normal, Bound, ParamId, ParamStore};

use crate::tensor::{
    embedding_lookup, layer_norm, masked_attention, AttentionShape, Tensor, TensorError, Var, LAYER_NORM_EPS,
};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("layer {layer} out of range 0..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Layer-1 attention sees itself plus this many predecessors. `None`
    /// gives the ordinary causal mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narrow_window: Option<usize>,
    /// 1-based layer whose output feeds the grounding loss.
    pub grounding_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(512)
    }
}

impl ModelConfig {
    /// Desk-scale defaults: 6 layers, d = 64, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size,
            max_seq_len: 128,
            narrow_window: Some(2),
            grounding_layer: 1,
        }
    }

    /// Full-scale architecture: 6 layers, d = 768, 12 heads, ffn 3072.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 6,
            d_model: 768,
            n_heads: 12,
            d_ffn: 3072,
            vocab_size: 30_522,
            max_seq_len: 128,
            narrow_window: Some(2),
            grounding_layer: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers > 0 && (self.grounding_layer == 0 || self.grounding_layer > self.n_layers) {
            return bad(format!(
                "grounding_layer {} outside 1..={}",
                self.grounding_layer, self.n_layers
            ));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count of the language model.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ffn;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let final_norm = if self.n_layers > 0 { 2 * d } else { 0 };
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * block + final_norm
    }
}

/// Padded token ids for a batch of sequences, row-major `[batch, seq_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    /// `true` for real tokens, `false` for padding.
    pub real: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    /// Right-pads `seqs` to the longest length with `pad_id`.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S], pad_id: u32) -> Self {
        let seq_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut real = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            real.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(pad_id, seq_len - s.len()));
            real.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Self {
            ids,
            real,
            batch: seqs.len(),
            seq_len,
        }
    }

    pub fn single(seq: &[u32]) -> Self {
        Self::from_sequences(&[seq], 0)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.real
            .chunks(self.seq_len.max(1))
            .map(|c| c.iter().filter(|&&r| r).count())
            .collect()
    }
}

/// Allowed-key matrix for causal attention, row-major `[seq_len, seq_len]`:
/// `(q, k)` is allowed iff `k ≤ q` and, with a window, `q − k ≤ window`.
pub fn attention_mask(seq_len: usize, window: Option<usize>) -> Vec<bool> {
    let mut m = vec![false; seq_len * seq_len];
    for q in 0..seq_len {
        for k in 0..=q {
            m[q * seq_len + k] = window.is_none_or(|w| q - k <= w);
        }
    }
    m
}

/// Hidden states `h_0..h_n`, each `[batch·seq_len, d]`. `h_0` is the
/// embedding plus position; `h_n` is the final state after the output norm.
#[derive(Debug, Clone)]
pub struct LayerActivations<'t> {
    pub layers: Vec<Var<'t>>,
}

impl<'t> LayerActivations<'t> {
    pub fn tap(&self, layer: usize) -> Result<Var<'t>> {
        self.layers.get(layer).copied().ok_or(ModelError::LayerOutOfRange {
            layer,
            n_layers: self.layers.len().saturating_sub(1),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Output of a forward pass over `batch·seq_len` positions.
#[derive(Debug, Clone)]
pub struct Forward<'t> {
    pub logits: Var<'t>,
    pub acts: LayerActivations<'t>,
    pub seq_len: usize,
}

/// Hook that may rewrite the residual stream before block `layer` (0-based).
pub type BlockHook<'a, 't> = &'a dyn Fn(usize, Var<'t>) -> Result<Var<'t>>;

/// Optional extras for [`TransformerLM::forward_with`].
#[derive(Default)]
pub struct ForwardOptions<'a, 't> {
    /// One `[batch, d]` embedding per sequence, placed before the tokens.
    pub prefix: Option<Var<'t>>,
    pub before_block: Option<BlockHook<'a, 't>>,
    /// Replaces the tied output matrix (only the untied-twin test uses it).
    pub output_weight: Option<Var<'t>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

/// The causal language model. Parameters live in `params`; other modules
/// may register extra tensors in the same store.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLM {
    pub config: ModelConfig,
    pub params: ParamStore,
    wte: ParamId,
    wpe: ParamId,
    blocks: Vec<BlockParams>,
    ln_f: Option<(ParamId, ParamId)>,
}

pub const WTE: &str = "wte";

impl TransformerLM {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let f = config.d_ffn;
        p.add(WTE, truncated_normal(&mut rng, &[config.vocab_size, d], INIT_STD));
        p.add("wpe", truncated_normal(&mut rng, &[config.max_seq_len, d], INIT_STD));
        for l in 0..config.n_layers {
            let n = |s: &str| format!("h.{l}.{s}");
            p.add(n("ln1.g"), Tensor::full(&[d], 1.0));
            p.add(n("ln1.b"), Tensor::zeros(&[d]));
            for w in ["q", "k", "v", "o"] {
                p.add(n(&format!("attn.w{w}")), truncated_normal(&mut rng, &[d, d], INIT_STD));
                p.add(n(&format!("attn.b{w}")), Tensor::zeros(&[d]));
            }
            p.add(n("ln2.g"), Tensor::full(&[d], 1.0));
            p.add(n("ln2.b"), Tensor::zeros(&[d]));
            p.add(n("mlp.w_fc"), truncated_normal(&mut rng, &[d, f], INIT_STD));
            p.add(n("mlp.b_fc"), Tensor::zeros(&[f]));
            p.add(n("mlp.w_proj"), truncated_normal(&mut rng, &[f, d], INIT_STD));
            p.add(n("mlp.b_proj"), Tensor::zeros(&[d]));
        }
        if config.n_layers > 0 {
            p.add("ln_f.g", Tensor::full(&[d], 1.0));
            p.add("ln_f.b", Tensor::zeros(&[d]));
        }
        Self::from_params(config, p)
    }

    /// Re-attaches to a store that already holds every LM tensor by name.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params.id(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            if params.get(id).shape() != shape {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let d = config.d_model;
        let f = config.d_ffn;
        let wte = get(WTE, &[config.vocab_size, d])?;
        let wpe = get("wpe", &[config.max_seq_len, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("h.{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: get(&n("ln1.g"), &[d])?,
                ln1_b: get(&n("ln1.b"), &[d])?,
                wq: get(&n("attn.wq"), &[d, d])?,
                bq: get(&n("attn.bq"), &[d])?,
                wk: get(&n("attn.wk"), &[d, d])?,
                bk: get(&n("attn.bk"), &[d])?,
                wv: get(&n("attn.wv"), &[d, d])?,
                bv: get(&n("attn.bv"), &[d])?,
                wo: get(&n("attn.wo"), &[d, d])?,
                bo: get(&n("attn.bo"), &[d])?,
                ln2_g: get(&n("ln2.g"), &[d])?,
                ln2_b: get(&n("ln2.b"), &[d])?,
                w_fc: get(&n("mlp.w_fc"), &[d, f])?,
                b_fc: get(&n("mlp.b_fc"), &[f])?,
                w_proj: get(&n("mlp.w_proj"), &[f, d])?,
                b_proj: get(&n("mlp.b_proj"), &[d])?,
            });
        }
        let ln_f = if config.n_layers > 0 {
            Some((get("ln_f.g", &[d])?, get("ln_f.b", &[d])?))
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            wte,
            wpe,
            blocks,
            ln_f,
        })
    }

    pub fn wte(&self) -> ParamId {
        self.wte
    }

    pub fn wpe(&self) -> ParamId {
        self.wpe
    }

    /// Number of tensors owned by the language model itself (a prefix of
    /// the store; extra components are registered after it).
    pub fn lm_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wte, self.wpe];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b, b.w_fc, b.b_fc,
                b.w_proj, b.b_proj,
            ]);
        }
        if let Some((g, b)) = self.ln_f {
            ids.extend([g, b]);
        }
        ids
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, batch: &TokenBatch) -> Result<Forward<'t>> {
        self.forward_with(bound, batch, ForwardOptions::default())
    }

    /// Single-sequence convenience wrapper around [`Self::forward`].
    pub fn forward_tokens<'t>(&self, bound: &Bound<'t>, tokens: &[u32]) -> Result<Forward<'t>> {
        self.forward(bound, &TokenBatch::single(tokens))
    }

    pub fn forward_with<'t>(
        &self,
        bound: &Bound<'t>,
        batch: &TokenBatch,
        opts: ForwardOptions<'_, 't>,
    ) -> Result<Forward<'t>> {
        let cfg = &self.config;
        let b = batch.batch;
        let offset = usize::from(opts.prefix.is_some());
        let t = batch.seq_len + offset;
        if t > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: cfg.max_seq_len,
            });
        }
        let wte = bound.var(self.wte);
        let tok = embedding_lookup(wte, &batch.ids)?;
        let mut key_real = batch.real.clone();
        let tok = match opts.prefix {
            None => tok,
            Some(prefix) => {
                if prefix.shape() != [b, cfg.d_model] {
                    return Err(TensorError::Shape {
                        op: "prefix",
                        lhs: prefix.shape(),
                        rhs: vec![b, cfg.d_model],
                    }
                    .into());
                }
                let stacked = Var::concat_rows(&[prefix, tok])?;
                let mut order = Vec::with_capacity(b * t);
                key_real = Vec::with_capacity(b * t);
                for s in 0..b {
                    order.push(s);
                    key_real.push(true);
                    for j in 0..batch.seq_len {
                        order.push(b + s * batch.seq_len + j);
                        key_real.push(batch.real[s * batch.seq_len + j]);
                    }
                }
                stacked.gather_rows(&order)?
            }
        };
        let positions: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
        let pos = embedding_lookup(bound.var(self.wpe), &positions)?;
        let mut h = tok.add(pos)?;

        let narrow = Rc::new(batched_mask(&attention_mask(t, cfg.narrow_window), &key_real, b, t));
        let full = if cfg.narrow_window.is_some() {
            Rc::new(batched_mask(&attention_mask(t, None), &key_real, b, t))
        } else {
            Rc::clone(&narrow)
        };

        let mut layers = Vec::with_capacity(cfg.n_layers + 1);
        layers.push(h);
        let shape = AttentionShape {
            batch: b,
            q_len: t,
            k_len: t,
            heads: cfg.n_heads,
        };
        for (l, blk) in self.blocks.iter().enumerate() {
            if let Some(hook) = opts.before_block {
                h = hook(l, h)?;
            }
            let mask = if l == 0 { Rc::clone(&narrow) } else { Rc::clone(&full) };
            h = self.block(bound, blk, h, shape, mask)?;
            if l + 1 == self.blocks.len() {
                let (g, bb) = self.ln_f.expect("final norm exists when layers exist");
                layers.push(layer_norm(h, bound.var(g), bound.var(bb), LAYER_NORM_EPS)?);
            } else {
                layers.push(h);
            }
        }
        let head = opts.output_weight.unwrap_or(wte);
        let logits = layers.last().unwrap().matmul_t(head)?;
        Ok(Forward {
            logits,
            acts: LayerActivations { layers },
            seq_len: t,
        })
    }

    fn block<'t>(
        &self,
        bound: &Bound<'t>,
        p: &BlockParams,
        x: Var<'t>,
        shape: AttentionShape,
        mask: Rc<Vec<bool>>,
    ) -> Result<Var<'t>> {
        let v = |id| bound.var(id);
        let a = layer_norm(x, v(p.ln1_g), v(p.ln1_b), LAYER_NORM_EPS)?;
        let q = a.matmul(v(p.wq))?.add_row(v(p.bq))?;
        let k = a.matmul(v(p.wk))?.add_row(v(p.bk))?;
        let vv = a.matmul(v(p.wv))?.add_row(v(p.bv))?;
        let att = masked_attention(q, k, vv, shape, mask)?;
        let x = x.add(att.matmul(v(p.wo))?.add_row(v(p.bo))?)?;
        let m = layer_norm(x, v(p.ln2_g), v(p.ln2_b), LAYER_NORM_EPS)?;
        let f = m
            .matmul(v(p.w_fc))?
            .add_row(v(p.b_fc))?
            .gelu()
            .matmul(v(p.w_proj))?
            .add_row(v(p.b_proj))?;
        Ok(x.add(f)?)
    }
}

/// Expands a `[t, t]` causal mask into `[batch, t, t]`, removing padded keys.
pub fn batched_mask(causal: &[bool], key_real: &[bool], batch: usize, t: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * t * t);
    for b in 0..batch {
        for q in 0..t {
            for k in 0..t {
                out.push(causal[q * t + k] && key_real[b * t + k]);
            }
        }
    }
    out
}
