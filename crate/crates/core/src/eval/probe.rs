//! One-hidden-layer MLP classifier and macro-F1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::model::{truncated_normal, ParamStore};
use crate::tensor::{cross_entropy, Tape, Tensor};
use crate::train::optim::{adamw_step, AdamState, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of training rows held out for early stopping.
    pub val_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            lr: 1e-3,
            weight_decay: 1e-4,
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.1,
        }
    }
}

/// Macro-averaged F1 over `n_classes`; a class with no true and no
/// predicted instances scores 0.
pub fn macro_f1(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    if n_classes == 0 {
        return 0.0;
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum::<f64>()
        / n_classes as f64
}

/// Trained probe weights.
#[derive(Debug, Clone)]
pub struct Mlp {
    store: ParamStore,
    dim: usize,
    n_classes: usize,
}

impl Mlp {
    fn logits<'t>(&self, tape: &'t Tape, x: &[f64], rows: usize) -> Result<crate::tensor::Var<'t>> {
        let bound = self.store.bind(tape);
        let v = bound.vars();
        let input = tape.constant(vec![rows, self.dim], x.to_vec())?;
        Ok(input.matmul(v[0])?.add_row(v[1])?.relu().matmul(v[2])?.add_row(v[3])?)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<usize>> {
        let rows = x.len() / self.dim;
        let tape = Tape::new();
        let logits = self.logits(&tape, x, rows)?.value();
        Ok((0..rows)
            .map(|r| {
                let row = &logits[r * self.n_classes..(r + 1) * self.n_classes];
                (0..self.n_classes).fold(0, |b, c| if row[c] > row[b] { c } else { b })
            })
            .collect())
    }
}

/// Trains the probe full-batch with AdamW, keeping the weights with the
/// best held-out macro-F1 (ties broken by lower held-out loss).
/// Returns the probe and its best held-out macro-F1.
pub fn train_probe(x: &[f64], y: &[usize], dim: usize, n_classes: usize, cfg: &ProbeConfig, seed: u64) -> Result<(Mlp, f64)> {
    let n = y.len();
    if n < 2 || x.len() != n * dim {
        return Err(EvalError::Input(format!("probe needs at least 2 rows of dim {dim}")));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(EvalError::Input(format!("label {bad} outside {n_classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<usize>) {
        let mut xs = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            xs.extend_from_slice(&x[i * dim..(i + 1) * dim]);
        }
        (xs, idx.iter().map(|&i| y[i]).collect())
    };
    let (xt, yt) = gather(train_idx);
    let (xv, yv) = gather(val_idx);

    let mut store = ParamStore::new();
    store.add("probe.w1", truncated_normal(&mut rng, &[dim, cfg.hidden], (2.0 / dim as f64).sqrt()));
    store.add("probe.b1", Tensor::zeros(&[cfg.hidden]));
    store.add("probe.w2", truncated_normal(&mut rng, &[cfg.hidden, n_classes], (1.0 / cfg.hidden as f64).sqrt()));
    store.add("probe.b2", Tensor::zeros(&[n_classes]));
    let mut mlp = Mlp { store, dim, n_classes };
    let mut opt = AdamState::new(&mlp.store);
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let targets: Vec<u32> = yt.iter().map(|&c| c as u32).collect();
    let mask = vec![true; yt.len()];
    let val_targets: Vec<u32> = yv.iter().map(|&c| c as u32).collect();

    let mut best = (f64::NEG_INFINITY, f64::INFINITY, mlp.store.clone());
    let mut since = 0;
    for _ in 0..cfg.max_epochs {
        let tape = Tape::new();
        let bound = mlp.store.bind(&tape);
        let v = bound.vars();
        let input = tape.constant(vec![yt.len(), dim], xt.clone())?;
        let logits = input.matmul(v[0])?.add_row(v[1])?.relu().matmul(v[2])?.add_row(v[3])?;
        let loss = cross_entropy(logits, &targets, &mask)?.loss;
        let grads = tape.backward(loss)?;
        mlp.store.zero_grads();
        mlp.store.accumulate(&bound, &grads);
        adamw_step(&mut mlp.store, &mut opt, cfg.lr, &adam);

        let f1 = macro_f1(&yv, &mlp.predict(&xv)?, n_classes);
        let tape = Tape::new();
        let vl = cross_entropy(mlp.logits(&tape, &xv, yv.len())?, &val_targets, &vec![true; yv.len()])?
            .loss
            .item();
        if f1 > best.0 || (f1 == best.0 && vl < best.1) {
            best = (f1, vl, mlp.store.clone());
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    mlp.store = best.2;
    Ok((mlp, best.0))
}
