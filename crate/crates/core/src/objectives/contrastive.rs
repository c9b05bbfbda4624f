//! Cross-modal contrastive losses: the token-level grounding loss and the
//! sentence-level CLIP loss, plus the projection head they share.

use rand::Rng;

use super::{ObjectiveError, Result};
use crate::data::{BOS, EOS, PAD};
use crate::model::{truncated_normal, Bound, ParamId, ParamStore, TokenBatch};
use crate::tensor::{cross_entropy, Tensor, Var};

/// Initial temperature.
pub const INIT_TAU: f64 = 0.07;
/// Lower bound on the temperature used in the scores.
pub const MIN_TAU: f64 = 0.01;

/// Bias-free `D → d` map applied to image features; absent when `D = d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualAdapter {
    w: Option<ParamId>,
    pub feature_dim: usize,
    pub d_model: usize,
}

impl VisualAdapter {
    pub const NAME: &'static str = "adapter.w";

    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, feature_dim: usize, d_model: usize, rng: &mut R) -> Self {
        let w = (feature_dim != d_model).then(|| {
            store.add(
                Self::NAME,
                truncated_normal(rng, &[feature_dim, d_model], 1.0 / (feature_dim as f64).sqrt()),
            )
        });
        Self { w, feature_dim, d_model }
    }

    pub fn attach(store: &ParamStore, feature_dim: usize, d_model: usize) -> Result<Self> {
        let w = if feature_dim == d_model {
            None
        } else {
            Some(super::lookup(store, Self::NAME, &[feature_dim, d_model])?)
        };
        Ok(Self { w, feature_dim, d_model })
    }

    pub fn param(&self) -> Option<ParamId> {
        self.w
    }

    /// `[n, D] → [n, d]`.
    pub fn apply<'t>(&self, bound: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.feature_dim {
            return Err(ObjectiveError::Shape(format!(
                "image features {shape:?} do not have feature dim {}",
                self.feature_dim
            )));
        }
        Ok(match self.w {
            Some(w) => features.matmul(bound.var(w))?,
            None => features,
        })
    }
}

/// Projections `M_V`, `M_L` and the log inverse temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundingHead {
    pub m_v: ParamId,
    pub m_l: ParamId,
    pub log_inv_tau: ParamId,
}

impl GroundingHead {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            m_v: store.add("ground.m_v", truncated_normal(rng, &[d, d], std)),
            m_l: store.add("ground.m_l", truncated_normal(rng, &[d, d], std)),
            log_inv_tau: store.add("ground.log_inv_tau", Tensor::scalar((1.0 / INIT_TAU).ln())),
        }
    }

    pub fn attach(store: &ParamStore, d: usize) -> Result<Self> {
        Ok(Self {
            m_v: super::lookup(store, "ground.m_v", &[d, d])?,
            m_l: super::lookup(store, "ground.m_l", &[d, d])?,
            log_inv_tau: super::lookup(store, "ground.log_inv_tau", &[1])?,
        })
    }

    /// `1/τ` with `τ ≥ MIN_TAU`.
    pub fn inv_tau<'t>(&self, bound: &Bound<'t>) -> Var<'t> {
        bound.var(self.log_inv_tau).clamp_max((1.0 / MIN_TAU).ln()).exp()
    }

    /// Score matrix `[n, N]`: row `i` is image `i`, column `t` a token
    /// representation; entry `(M_V v_i)·(M_L h_t) / τ`.
    pub fn scores<'t>(&self, bound: &Bound<'t>, images: Var<'t>, reps: Var<'t>) -> Result<Var<'t>> {
        let v = images.matmul_t(bound.var(self.m_v))?;
        let l = reps.matmul_t(bound.var(self.m_l))?;
        Ok(v.matmul_t(l)?.mul_scalar(self.inv_tau(bound))?)
    }
}

/// Flattened row indices of the tokens that take part in the contrastive
/// loss (real tokens other than delimiters) and the caption owning each.
pub fn contrastive_positions(batch: &TokenBatch) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut owner = Vec::new();
    for (r, (&id, &real)) in batch.ids.iter().zip(&batch.real).enumerate() {
        if real && id != PAD && id != BOS && id != EOS {
            rows.push(r);
            owner.push(r / batch.seq_len);
        }
    }
    (rows, owner)
}

/// Matching scores between every image and every eligible token of every
/// caption in the batch. Returns the `[n, N]` score matrix and the owning
/// caption of each column.
pub fn matching_scores<'t>(
    head: &GroundingHead,
    adapter: &VisualAdapter,
    bound: &Bound<'t>,
    image_features: Var<'t>,
    token_reps: Var<'t>,
    batch: &TokenBatch,
) -> Result<(Var<'t>, Vec<usize>)> {
    let (rows, owner) = contrastive_positions(batch);
    if rows.is_empty() {
        return Err(ObjectiveError::EmptyBatch("no eligible caption tokens"));
    }
    let images = adapter.apply(bound, image_features)?;
    let reps = token_reps.gather_rows(&rows)?;
    Ok((head.scores(bound, images, reps)?, owner))
}

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Token-level contrastive loss over scores `S[i, t]` (image `i`, token
/// column `t` owned by caption `owner[t]`).
///
/// For token `t` of caption `i`, the image-side term contrasts the paired
/// image against all images, and the token-side term contrasts the token
/// against all tokens of other captions under image `i`. The loss is the
/// mean over tokens of `−(½ ln term_A + ½ ln term_B)`.
pub fn lexi_contrastive_loss<'t>(scores: Var<'t>, owner: &[usize]) -> Result<Var<'t>> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(ObjectiveError::EmptyBatch("contrastive scores are empty"));
    }
    let (n, nt) = (shape[0], shape[1]);
    if owner.len() != nt || owner.iter().any(|&o| o >= n) {
        return Err(ObjectiveError::Shape(format!(
            "owner list of length {} does not index a [{n}, {nt}] score matrix",
            owner.len()
        )));
    }
    let s = scores.value();
    let at = |i: usize, t: usize| s[i * nt + t];

    // image side: log-softmax down each column
    let col_lse: Vec<f64> = (0..nt).map(|t| lse((0..n).map(move |k| at(k, t)))).collect();
    // token side: per-image log-sum-exp over other captions' tokens
    let neg_lse: Vec<f64> = (0..n)
        .map(|i| lse((0..nt).filter(|&t| owner[t] != i).map(|t| at(i, t))))
        .collect();
    let z: Vec<f64> = (0..nt)
        .map(|t| {
            let (x, neg) = (at(owner[t], t), neg_lse[owner[t]]);
            if neg == f64::NEG_INFINITY {
                x
            } else {
                x.max(neg) + ((x - x.max(neg)).exp() + (neg - x.max(neg)).exp()).ln()
            }
        })
        .collect();
    let mut total = 0.0;
    for t in 0..nt {
        let x = at(owner[t], t);
        total += 0.5 * (x - col_lse[t]) + 0.5 * (x - z[t]);
    }
    let inv = 1.0 / nt as f64;
    let value = -total * inv;

    let id = scores.id();
    let owner = owner.to_vec();
    Ok(scores.tape().custom(&[scores], vec![1], vec![value], move |g, sink| {
        let w = 0.5 * g[0] * inv;
        let out = sink.slot(id);
        let at = |i: usize, t: usize| s[i * nt + t];
        let mut c = vec![0.0; n];
        for t in 0..nt {
            let i = owner[t];
            for k in 0..n {
                out[k * nt + t] += w * (at(k, t) - col_lse[t]).exp();
            }
            out[i * nt + t] -= w;
            out[i * nt + t] += w * ((at(i, t) - z[t]).exp() - 1.0);
            if neg_lse[i] > f64::NEG_INFINITY {
                c[i] += (neg_lse[i] - z[t]).exp();
            }
        }
        for i in 0..n {
            if c[i] == 0.0 {
                continue;
            }
            for t in 0..nt {
                if owner[t] != i {
                    out[i * nt + t] += w * c[i] * (at(i, t) - neg_lse[i]).exp();
                }
            }
        }
    }))
}

/// Flattened row of the last real token of each sequence.
pub fn last_token_rows(batch: &TokenBatch) -> Result<Vec<usize>> {
    batch
        .lengths()
        .into_iter()
        .enumerate()
        .map(|(b, len)| {
            if len == 0 {
                Err(ObjectiveError::EmptyBatch("empty caption"))
            } else {
                Ok(b * batch.seq_len + len - 1)
            }
        })
        .collect()
}

/// Symmetric InfoNCE over the `[n, n]` image–sentence score matrix.
pub fn clip_loss_from_scores<'t>(scores: Var<'t>) -> Result<Var<'t>> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(ObjectiveError::EmptyBatch("CLIP needs a non-empty square score matrix"));
    }
    let n = shape[0];
    let targets: Vec<u32> = (0..n as u32).collect();
    let mask = vec![true; n];
    let rows = cross_entropy(scores, &targets, &mask)?.loss;
    let cols = cross_entropy(scores.transpose()?, &targets, &mask)?.loss;
    Ok(rows.add(cols)?.scale(0.5))
}

/// Sentence-level CLIP loss with the sentence embedding taken from
/// `reps` (normally the top layer) at each caption's last real token.
pub fn clip_sentence_loss<'t>(
    head: &GroundingHead,
    adapter: &VisualAdapter,
    bound: &Bound<'t>,
    image_features: Var<'t>,
    reps: Var<'t>,
    batch: &TokenBatch,
) -> Result<Var<'t>> {
    if batch.batch == 0 {
        return Err(ObjectiveError::EmptyBatch("CLIP batch"));
    }
    let sentences = reps.gather_rows(&last_token_rows(batch)?)?;
    let images = adapter.apply(bound, image_features)?;
    clip_loss_from_scores(head.scores(bound, images, sentences)?)
}
