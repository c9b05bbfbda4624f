//! Perceiver resampler and tanh-gated cross-attention blocks.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{lookup, ObjectiveError, Result};
use crate::model::{truncated_normal, Bound, ParamId, ParamStore, INIT_STD};
use crate::tensor::{layer_norm, masked_attention, AttentionShape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlamingoConfig {
    pub n_latents: usize,
    pub resampler_layers: usize,
    /// A cross-attention block precedes every `every`-th self-attention
    /// layer (1-based layers `every, 2·every, …`).
    pub every: usize,
}

impl Default for FlamingoConfig {
    fn default() -> Self {
        Self {
            n_latents: 8,
            resampler_layers: 2,
            every: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct AttnFfn {
    ln_q: (ParamId, ParamId),
    ln_kv: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_ff: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl AttnFfn {
    fn build(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut dyn rand::RngCore) -> Self {
        let ln = |store: &mut ParamStore, name: &str| {
            (
                store.add(format!("{prefix}.{name}.g"), Tensor::full(&[d], 1.0)),
                store.add(format!("{prefix}.{name}.b"), Tensor::zeros(&[d])),
            )
        };
        let ln_q = ln(store, "ln_q");
        let ln_kv = ln(store, "ln_kv");
        let w = |store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut dyn rand::RngCore| {
            store.add(format!("{prefix}.{name}"), truncated_normal(rng, shape, INIT_STD))
        };
        let wq = w(store, "wq", &[d, d], rng);
        let wk = w(store, "wk", &[d, d], rng);
        let wv = w(store, "wv", &[d, d], rng);
        let wo = w(store, "wo", &[d, d], rng);
        let ln_ff = ln(store, "ln_ff");
        let w1 = w(store, "w1", &[d, ffn], rng);
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(&[ffn]));
        let w2 = w(store, "w2", &[ffn, d], rng);
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]));
        Self {
            ln_q,
            ln_kv,
            wq,
            wk,
            wv,
            wo,
            ln_ff,
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn attach(store: &ParamStore, prefix: &str, d: usize, ffn: usize) -> Result<Self> {
        let get = |name: &str, shape: &[usize]| lookup(store, &format!("{prefix}.{name}"), shape);
        let ln = |name: &str| -> Result<(ParamId, ParamId)> { Ok((get(&format!("{name}.g"), &[d])?, get(&format!("{name}.b"), &[d])?)) };
        Ok(Self {
            ln_q: ln("ln_q")?,
            ln_kv: ln("ln_kv")?,
            wq: get("wq", &[d, d])?,
            wk: get("wk", &[d, d])?,
            wv: get("wv", &[d, d])?,
            wo: get("wo", &[d, d])?,
            ln_ff: ln("ln_ff")?,
            w1: get("w1", &[d, ffn])?,
            b1: get("b1", &[ffn])?,
            w2: get("w2", &[ffn, d])?,
            b2: get("b2", &[d])?,
        })
    }

    /// Attention output projected by `wo` and the feed-forward branch
    /// input; queries `x`, keys/values `kv`.
    fn attend<'t>(&self, bound: &Bound<'t>, x: Var<'t>, kv: Var<'t>, shape: AttentionShape) -> Result<Var<'t>> {
        let v = |id| bound.var(id);
        let q = layer_norm(x, v(self.ln_q.0), v(self.ln_q.1), LAYER_NORM_EPS)?.matmul(v(self.wq))?;
        let kvn = layer_norm(kv, v(self.ln_kv.0), v(self.ln_kv.1), LAYER_NORM_EPS)?;
        let k = kvn.matmul(v(self.wk))?;
        let vv = kvn.matmul(v(self.wv))?;
        let allowed = Rc::new(vec![true; shape.batch * shape.q_len * shape.k_len]);
        Ok(masked_attention(q, k, vv, shape, allowed)?.matmul(v(self.wo))?)
    }

    fn ffn<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let v = |id| bound.var(id);
        Ok(layer_norm(x, v(self.ln_ff.0), v(self.ln_ff.1), LAYER_NORM_EPS)?
            .matmul(v(self.w1))?
            .add_row(v(self.b1))?
            .gelu()
            .matmul(v(self.w2))?
            .add_row(v(self.b2))?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct GatedBlock {
    before_layer: usize,
    inner: AttnFfn,
    gate_attn: ParamId,
    gate_ffn: ParamId,
}

/// Resampler plus gated cross-attention blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flamingo {
    pub config: FlamingoConfig,
    n_heads: usize,
    latents: ParamId,
    resampler: Vec<AttnFfn>,
    blocks: Vec<GatedBlock>,
}

fn gated_layers(config: &FlamingoConfig, n_layers: usize) -> Vec<usize> {
    (0..n_layers).filter(|l| (l + 1) % config.every.max(1) == 0).collect()
}

impl Flamingo {
    pub fn validate(config: &FlamingoConfig) -> Result<()> {
        if config.n_latents == 0 || config.every == 0 {
            return Err(ObjectiveError::Config(
                "flamingo n_latents and every must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn register<R: Rng>(
        store: &mut ParamStore,
        config: FlamingoConfig,
        d: usize,
        d_ffn: usize,
        n_heads: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::validate(&config)?;
        let latents = store.add(
            "flamingo.latents",
            truncated_normal(rng, &[config.n_latents, d], INIT_STD),
        );
        let resampler = (0..config.resampler_layers)
            .map(|i| AttnFfn::build(store, &format!("flamingo.resampler.{i}"), d, d_ffn, rng))
            .collect();
        let blocks = gated_layers(&config, n_layers)
            .into_iter()
            .map(|l| {
                let prefix = format!("flamingo.xattn.{l}");
                let inner = AttnFfn::build(store, &prefix, d, d_ffn, rng);
                GatedBlock {
                    before_layer: l,
                    inner,
                    gate_attn: store.add(format!("{prefix}.gate_attn"), Tensor::scalar(0.0)),
                    gate_ffn: store.add(format!("{prefix}.gate_ffn"), Tensor::scalar(0.0)),
                }
            })
            .collect();
        Ok(Self {
            config,
            n_heads,
            latents,
            resampler,
            blocks,
        })
    }

    pub fn attach(
        store: &ParamStore,
        config: FlamingoConfig,
        d: usize,
        d_ffn: usize,
        n_heads: usize,
        n_layers: usize,
    ) -> Result<Self> {
        Self::validate(&config)?;
        let latents = lookup(store, "flamingo.latents", &[config.n_latents, d])?;
        let resampler = (0..config.resampler_layers)
            .map(|i| AttnFfn::attach(store, &format!("flamingo.resampler.{i}"), d, d_ffn))
            .collect::<Result<_>>()?;
        let blocks = gated_layers(&config, n_layers)
            .into_iter()
            .map(|l| {
                let prefix = format!("flamingo.xattn.{l}");
                Ok(GatedBlock {
                    before_layer: l,
                    inner: AttnFfn::attach(store, &prefix, d, d_ffn)?,
                    gate_attn: lookup(store, &format!("{prefix}.gate_attn"), &[1])?,
                    gate_ffn: lookup(store, &format!("{prefix}.gate_ffn"), &[1])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            n_heads,
            latents,
            resampler,
            blocks,
        })
    }

    /// 0-based self-attention layers preceded by a gated block.
    pub fn gated_layers(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.before_layer).collect()
    }

    pub fn gate_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.gate_attn, b.gate_ffn]).collect()
    }

    /// Compresses `visual` (`[n·v, d]`, `v` tokens per image) into
    /// `[n·L, d]` latents.
    pub fn resample<'t>(&self, bound: &Bound<'t>, visual: Var<'t>, n: usize) -> Result<Var<'t>> {
        let l = self.config.n_latents;
        let rows = visual.shape()[0];
        if n == 0 || rows % n != 0 {
            return Err(ObjectiveError::Shape(format!("{rows} visual rows for {n} images")));
        }
        let v = rows / n;
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
        let mut x = bound.var(self.latents).gather_rows(&idx)?;
        for layer in &self.resampler {
            let stacked = Var::concat_rows(&[visual, x])?;
            let order: Vec<usize> = (0..n)
                .flat_map(|i| (i * v..(i + 1) * v).chain(rows + i * l..rows + (i + 1) * l))
                .collect();
            let kv = stacked.gather_rows(&order)?;
            let shape = AttentionShape {
                batch: n,
                q_len: l,
                k_len: v + l,
                heads: self.n_heads,
            };
            x = x.add(layer.attend(bound, x, kv, shape)?)?;
            x = x.add(layer.ffn(bound, x)?)?;
        }
        Ok(x)
    }

    /// Applies the gated block scheduled before `layer`, if any. `h` is
    /// `[batch·seq_len, d]`; `latents` is `[batch·L, d]`.
    pub fn apply_before<'t>(
        &self,
        bound: &Bound<'t>,
        layer: usize,
        h: Var<'t>,
        latents: Var<'t>,
        batch: usize,
        seq_len: usize,
    ) -> Result<Var<'t>> {
        let Some(blk) = self.blocks.iter().find(|b| b.before_layer == layer) else {
            return Ok(h);
        };
        let shape = AttentionShape {
            batch,
            q_len: seq_len,
            k_len: self.config.n_latents,
            heads: self.n_heads,
        };
        let ga = bound.var(blk.gate_attn).tanh();
        let h = h.add(blk.inner.attend(bound, h, latents, shape)?.mul_scalar(ga)?)?;
        let gf = bound.var(blk.gate_ffn).tanh();
        Ok(h.add(blk.inner.ffn(bound, h)?.mul_scalar(gf)?)?)
    }
}
