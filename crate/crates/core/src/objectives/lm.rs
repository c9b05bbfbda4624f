//! Next-token prediction and the visual-prefix (GIT) forward pass.

use super::contrastive::VisualAdapter;
use super::{ObjectiveError, Result};
use crate::model::{Bound, Forward, ForwardOptions, TokenBatch, TransformerLM};
use crate::tensor::{cross_entropy, Var};

/// Targets for logits row `r`: the next token of the same sequence. Rows
/// without a real next token are masked out.
pub fn shifted_targets(batch: &TokenBatch) -> Result<(Vec<u32>, Vec<bool>)> {
    if batch.seq_len < 2 {
        return Err(ObjectiveError::NoTarget);
    }
    let t = batch.seq_len;
    let mut targets = vec![0u32; batch.ids.len()];
    let mut mask = vec![false; batch.ids.len()];
    for b in 0..batch.batch {
        for j in 0..t - 1 {
            let r = b * t + j;
            if batch.real[r] && batch.real[r + 1] {
                targets[r] = batch.ids[r + 1];
                mask[r] = true;
            }
        }
    }
    Ok((targets, mask))
}

/// Mean next-token cross-entropy over all predicted positions.
pub fn next_token_loss<'t>(logits: Var<'t>, batch: &TokenBatch) -> Result<Var<'t>> {
    let (targets, mask) = shifted_targets(batch)?;
    let ce = cross_entropy(logits, &targets, &mask)?;
    if ce.all_masked {
        return Err(ObjectiveError::NoTarget);
    }
    Ok(ce.loss)
}

/// Forward with one adapted image feature prepended to each sequence.
/// Returns logits aligned with the token positions: row `j` of a sequence
/// holds the prediction for token `j` (row 0 comes from the visual slot).
pub fn git_forward<'t>(
    model: &TransformerLM,
    adapter: &VisualAdapter,
    bound: &Bound<'t>,
    image_features: Var<'t>,
    batch: &TokenBatch,
) -> Result<(Var<'t>, Forward<'t>)> {
    let prefix = adapter.apply(bound, image_features)?;
    let fwd = model.forward_with(
        bound,
        batch,
        ForwardOptions {
            prefix: Some(prefix),
            ..Default::default()
        },
    )?;
    let t1 = batch.seq_len + 1;
    let rows: Vec<usize> = (0..batch.batch)
        .flat_map(|b| (0..batch.seq_len).map(move |j| b * t1 + j))
        .collect();
    Ok((fwd.logits.gather_rows(&rows)?, fwd))
}

/// Cross-entropy of aligned logits (row `j` predicts token `j`) over text
/// targets `j ≥ 1`; the same scored set as [`next_token_loss`].
pub fn aligned_token_loss<'t>(logits: Var<'t>, batch: &TokenBatch) -> Result<Var<'t>> {
    if batch.seq_len < 2 {
        return Err(ObjectiveError::NoTarget);
    }
    let t = batch.seq_len;
    let mask: Vec<bool> = (0..batch.ids.len()).map(|r| r % t >= 1 && batch.real[r]).collect();
    let ce = cross_entropy(logits, &batch.ids, &mask)?;
    if ce.all_masked {
        return Err(ObjectiveError::NoTarget);
    }
    Ok(ce.loss)
}
