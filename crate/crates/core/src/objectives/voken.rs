//! Voken assignment and the voken readout loss.

use rand::Rng;

use super::contrastive::{GroundingHead, VisualAdapter};
use super::{lookup, ObjectiveError, Result};
use crate::data::formats::FeatureMatrix;
use crate::model::{truncated_normal, Bound, ParamId, ParamStore, TokenBatch, INIT_STD};
use crate::tensor::{cross_entropy, Tensor, Var};

/// Fixed bank of `K ≥ 2` image features; voken ids index its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VokenBank {
    pub features: FeatureMatrix,
}

impl VokenBank {
    pub fn new(features: FeatureMatrix) -> Result<Self> {
        if features.count < 2 {
            return Err(ObjectiveError::Config(format!(
                "voken bank needs at least 2 images, got {}",
                features.count
            )));
        }
        if features.data.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::Config("voken bank has non-finite features".into()));
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.count
    }

    pub fn is_empty(&self) -> bool {
        self.features.count == 0
    }
}

/// Column-wise argmax of a `[k, n]` score matrix; ties go to the lowest row.
pub fn argmax_columns(scores: &[f64], k: usize, n: usize) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(ObjectiveError::EmptyBatch("empty voken bank"));
    }
    Ok((0..n)
        .map(|t| {
            let mut best = 0;
            for i in 1..k {
                if scores[i * n + t] > scores[best * n + t] {
                    best = i;
                }
            }
            best as u32
        })
        .collect())
}

/// Voken of every position in `batch` (padding gets 0): the bank image
/// with the highest matching score against the token representation.
pub fn voken_assign<'t>(
    head: &GroundingHead,
    adapter: &VisualAdapter,
    bound: &Bound<'t>,
    reps: Var<'t>,
    bank: &VokenBank,
    batch: &TokenBatch,
) -> Result<Vec<u32>> {
    let f = &bank.features;
    let images = reps.tape().constant(vec![f.count, f.dim], f.data.clone())?;
    let images = adapter.apply(bound, images)?;
    let scores = head.scores(bound, images, reps)?;
    let n = batch.ids.len();
    let mut ids = argmax_columns(&scores.value(), f.count, n)?;
    for (v, &real) in ids.iter_mut().zip(&batch.real) {
        if !real {
            *v = 0;
        }
    }
    Ok(ids)
}

/// Linear readout over `K` voken classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VokenHead {
    pub w: ParamId,
    pub b: ParamId,
    pub n_vokens: usize,
}

impl VokenHead {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, n_vokens: usize, rng: &mut R) -> Self {
        Self {
            w: store.add("voken.w", truncated_normal(rng, &[d, n_vokens], INIT_STD)),
            b: store.add("voken.b", Tensor::zeros(&[n_vokens])),
            n_vokens,
        }
    }

    pub fn attach(store: &ParamStore, d: usize, n_vokens: usize) -> Result<Self> {
        Ok(Self {
            w: lookup(store, "voken.w", &[d, n_vokens])?,
            b: lookup(store, "voken.b", &[n_vokens])?,
            n_vokens,
        })
    }
}

/// Cross-entropy of the readout at row `r` against the voken of the next
/// token (`vokens[r + 1]`), over real positions.
pub fn voken_loss<'t>(
    head: &VokenHead,
    bound: &Bound<'t>,
    reps: Var<'t>,
    batch: &TokenBatch,
    vokens: &[u32],
) -> Result<Var<'t>> {
    if vokens.len() != batch.ids.len() {
        return Err(ObjectiveError::Shape(format!(
            "{} vokens for {} positions",
            vokens.len(),
            batch.ids.len()
        )));
    }
    let (_, mask) = super::lm::shifted_targets(batch)?;
    let targets: Vec<u32> = (0..vokens.len())
        .map(|r| if mask[r] { vokens[r + 1] } else { 0 })
        .collect();
    let logits = reps.matmul(bound.var(head.w))?.add_row(bound.var(head.b))?;
    let ce = cross_entropy(logits, &targets, &mask)?;
    if ce.all_masked {
        return Err(ObjectiveError::NoTarget);
    }
    Ok(ce.loss)
}
