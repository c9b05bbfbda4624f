//! Learning-rate schedule and AdamW.

use crate::model::ParamStore;

/// Linear warmup from 0 to `peak` over `warmup` steps, then constant.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> f64 {
    if step >= warmup {
        peak
    } else {
        peak * step as f64 / warmup.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Little-endian f64 dump of both moment sets.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.t.to_le_bytes());
        for set in [&self.m, &self.v] {
            for x in set.iter().flatten() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`Self::to_bytes`] for a store of the same layout.
    pub fn from_bytes(store: &ParamStore, bytes: &[u8]) -> Option<Self> {
        let sizes: Vec<usize> = store.iter().map(|(_, t)| t.numel()).collect();
        let total: usize = sizes.iter().sum();
        if bytes.len() != 8 + 16 * total {
            return None;
        }
        let t = u64::from_le_bytes(bytes[..8].try_into().ok()?);
        let mut vals = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = || -> Vec<Vec<f64>> { sizes.iter().map(|&n| vals.by_ref().take(n).collect()).collect() };
        let m = take();
        let v = take();
        Some(Self { t, m, v })
    }
}

/// One AdamW update of every parameter with a gradient buffer. Decay is
/// decoupled: `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamWConfig) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let tensor = store.get_mut(id);
        let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *p -= lr * cfg.weight_decay * *p;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}
