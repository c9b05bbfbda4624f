//! Grounded-only and mixed training loops.

use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, lr_at, AdamState, AdamWConfig};
use super::{Result, TrainConfig, TrainError};
use crate::data::{EpochSampler, GroundedBatch, GroundedDataset, SamplerState, TextDataset};
use crate::eval::perplexity;
use crate::model::{ParamStore, TokenBatch};
use crate::objectives::{GroundedModel, LossValues};
use crate::tensor::Tape;

/// Voken ids aligned with every token of every sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VokenTable {
    pub captions: Vec<Vec<u32>>,
    pub val_captions: Vec<Vec<u32>>,
    pub text: Vec<Vec<u32>>,
    pub val_text: Vec<Vec<u32>>,
}

/// Borrowed training inputs. `text` present means the mixed scenario.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub grounded: &'a GroundedDataset,
    pub val_grounded: Option<&'a GroundedDataset>,
    pub text: Option<&'a TextDataset>,
    pub val_text: Option<&'a TextDataset>,
    pub vokens: Option<&'a VokenTable>,
}

impl<'a> TrainData<'a> {
    pub fn grounded(grounded: &'a GroundedDataset, val: Option<&'a GroundedDataset>) -> Self {
        Self {
            grounded,
            val_grounded: val,
            text: None,
            val_text: None,
            vokens: None,
        }
    }

    pub fn mixed(
        grounded: &'a GroundedDataset,
        text: &'a TextDataset,
        val_text: Option<&'a TextDataset>,
    ) -> Self {
        Self {
            grounded,
            val_grounded: None,
            text: Some(text),
            val_text,
            vokens: None,
        }
    }

    pub fn is_mixed(&self) -> bool {
        self.text.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossValues,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean validation caption loss (grounded) or validation perplexity
    /// (mixed); lower is better.
    pub val_metric: Option<f64>,
}

/// Resumable loop position, stored in checkpoint metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub grounded_sampler: SamplerState,
    pub text_sampler: Option<SamplerState>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

/// Running minimum of a loss series.
pub fn running_min(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(f64::INFINITY, |m, &v| {
            *m = m.min(v);
            Some(*m)
        })
        .collect()
}

/// Per-position vokens of the given sequences, padded with 0.
pub fn batch_vokens(table: &[Vec<u32>], idx: &[usize], seq_len: usize) -> Vec<u32> {
    let mut out = vec![0u32; idx.len() * seq_len];
    for (b, &i) in idx.iter().enumerate() {
        let v = &table[i];
        out[b * seq_len..b * seq_len + v.len()].copy_from_slice(v);
    }
    out
}

pub fn text_batch(ds: &TextDataset, idx: &[usize]) -> TokenBatch {
    let seqs: Vec<&[u32]> = idx.iter().map(|&i| ds.chunks[i].as_slice()).collect();
    TokenBatch::from_sequences(&seqs, crate::data::PAD)
}

struct Best {
    epoch: usize,
    metric: f64,
    params: ParamStore,
}

/// Single-writer optimization loop over one [`GroundedModel`].
pub struct Trainer<'a> {
    pub model: GroundedModel,
    pub config: TrainConfig,
    pub lambda_u: f64,
    pub curve: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    data: TrainData<'a>,
    adam: AdamWConfig,
    opt: AdamState,
    grounded: EpochSampler,
    text: Option<EpochSampler>,
    step: u64,
    epoch: usize,
    warmup: u64,
    best: Option<Best>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: GroundedModel, config: &TrainConfig, data: TrainData<'a>) -> Result<Self> {
        config.validate()?;
        if data.grounded.is_empty() {
            return Err(TrainError::Config("grounded dataset is empty".into()));
        }
        if model.kind().uses_vokens() && data.vokens.is_none() {
            return Err(TrainError::Config(format!("{} needs voken targets", model.kind())));
        }
        let bs = config.grounded_batch_size(model.kind());
        let grounded = EpochSampler::new(data.grounded.len(), bs, config.seed, 1)?;
        let text = match data.text {
            Some(t) if t.is_empty() => return Err(TrainError::Config("ungrounded dataset is empty".into())),
            Some(t) => {
                let per_step = config
                    .text_batch_size
                    .unwrap_or_else(|| t.len().div_ceil(grounded.batches_per_epoch()).max(1));
                Some(EpochSampler::new(t.len(), per_step, config.seed, 2)?)
            }
            None => None,
        };
        let total = (config.epochs * grounded.batches_per_epoch()) as u64;
        let opt = AdamState::new(&model.lm.params);
        Ok(Self {
            lambda_u: config.mixed_lambda_u(),
            warmup: config.warmup_for(total),
            adam: AdamWConfig {
                beta1: config.betas[0],
                beta2: config.betas[1],
                eps: config.eps,
                weight_decay: config.weight_decay,
            },
            config: config.clone(),
            model,
            curve: Vec::new(),
            epochs: Vec::new(),
            data,
            opt,
            grounded,
            text,
            step: 0,
            epoch: 0,
            best: None,
        })
    }

    pub fn with_lambda_u(mut self, lambda_u: f64) -> Self {
        self.lambda_u = lambda_u;
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn warmup(&self) -> u64 {
        self.warmup
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.grounded.batches_per_epoch()
    }

    /// One optimizer update on the next batch(es).
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let (g_idx, _) = self.grounded.next_batch();
        let gb = GroundedBatch::from_indices(self.data.grounded, &g_idx)?;
        let g_vok = self
            .data
            .vokens
            .map(|v| batch_vokens(&v.captions, &g_idx, gb.tokens.seq_len));
        let text = match (&mut self.text, self.data.text) {
            (Some(s), Some(ds)) => {
                let (t_idx, _) = s.next_batch();
                let tb = text_batch(ds, &t_idx);
                let t_vok = self.data.vokens.map(|v| batch_vokens(&v.text, &t_idx, tb.seq_len));
                Some((tb, t_vok))
            }
            _ => None,
        };

        let lr = lr_at(self.step, self.config.peak_lr, self.warmup);
        let tape = Tape::new();
        let bound = self.model.lm.params.bind(&tape);
        let losses = match &text {
            Some((tb, tv)) => self.model.mixed_step_loss(
                &bound,
                &gb,
                g_vok.as_deref(),
                tb,
                tv.as_deref(),
                self.lambda_u,
            )?,
            None => self.model.grounded_loss(&bound, &gb, g_vok.as_deref())?,
        };
        let values = losses.values();
        if !values.is_finite() {
            return Err(self.diverged(format!("non-finite loss ({values})")));
        }
        let grads = tape.backward(losses.total())?;
        let params = &mut self.model.lm.params;
        params.zero_grads();
        params.accumulate(&bound, &grads);
        let grad_norm = params.clip_grad_norm(self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(self.diverged(format!("non-finite gradient norm ({values})")));
        }
        adamw_step(&mut self.model.lm.params, &mut self.opt, lr, &self.adam);
        if !self.model.lm.params.all_finite() {
            return Err(self.diverged(format!("non-finite parameters after update ({values})")));
        }
        self.step += 1;
        let rec = StepRecord {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss: values,
            grad_norm,
        };
        self.curve.push(rec);
        Ok(rec)
    }

    fn diverged(&self, detail: String) -> TrainError {
        TrainError::Diverged {
            step: self.step,
            epoch: self.epoch,
            detail,
        }
    }

    /// Validation metric of the current parameters, if validation data exists.
    pub fn validate(&self) -> Result<Option<f64>> {
        if self.data.is_mixed() {
            return match self.data.val_text {
                Some(v) if !v.is_empty() => Ok(Some(perplexity(&self.model.lm, v)?.perplexity)),
                _ => Ok(None),
            };
        }
        let Some(val) = self.data.val_grounded.filter(|v| !v.is_empty()) else {
            return Ok(None);
        };
        let vok = self.data.vokens.map(|v| v.val_captions.as_slice());
        Ok(Some(validation_loss(&self.model, val, vok, self.grounded.batch_size())?))
    }

    /// Runs one full epoch and records its validation metric.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let n = self.grounded.batches_per_epoch();
        let mut sum = 0.0;
        for _ in 0..n {
            sum += self.train_step()?.loss.total();
        }
        let val_metric = self.validate()?;
        let rec = EpochRecord {
            epoch: self.epoch,
            mean_loss: sum / n as f64,
            val_metric,
        };
        if let Some(m) = val_metric {
            if self.best.as_ref().is_none_or(|b| m < b.metric) {
                self.best = Some(Best {
                    epoch: self.epoch,
                    metric: m,
                    params: self.model.lm.params.clone(),
                });
            }
        }
        self.epochs.push(rec);
        self.epoch += 1;
        Ok(rec)
    }

    /// Trains until the configured epoch count.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            epoch: self.epoch,
            grounded_sampler: self.grounded.state(),
            text_sampler: self.text.as_ref().map(EpochSampler::state),
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_metric: self.best.as_ref().map(|b| b.metric),
        }
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.opt
    }

    pub fn best_params(&self) -> Option<&ParamStore> {
        self.best.as_ref().map(|b| &b.params)
    }

    /// Restores a loop position saved by [`Self::state`]; `best` holds the
    /// best-validation parameters recorded so far.
    pub fn restore(&mut self, state: TrainState, opt: AdamState, best: Option<ParamStore>) -> Result<()> {
        if opt.m.len() != self.opt.m.len() {
            return Err(TrainError::Checkpoint("optimizer state does not match the model".into()));
        }
        self.step = state.step;
        self.epoch = state.epoch;
        self.grounded.set_state(state.grounded_sampler);
        if let (Some(s), Some(t)) = (&mut self.text, state.text_sampler) {
            s.set_state(t);
        }
        self.opt = opt;
        self.best = match (state.best_epoch, state.best_metric, best) {
            (Some(epoch), Some(metric), Some(params)) => Some(Best { epoch, metric, params }),
            _ => None,
        };
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        let state = self.state();
        let final_params = self.model.lm.params.clone();
        let mut model = self.model;
        let best_epoch = self.best.as_ref().map(|b| b.epoch);
        let best_metric = self.best.as_ref().map(|b| b.metric);
        if let Some(b) = self.best {
            model.lm.params = b.params;
        }
        TrainOutcome {
            model,
            final_params,
            curve: self.curve,
            epochs: self.epochs,
            best_epoch,
            best_metric,
            state,
            optimizer: self.opt,
        }
    }
}

/// Result of a training run. `model` carries the best-validation
/// parameters (the final ones when no validation data was given).
pub struct TrainOutcome {
    pub model: GroundedModel,
    pub final_params: ParamStore,
    pub curve: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub state: TrainState,
    pub optimizer: AdamState,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.curve.first().map(|r| r.loss.total())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|r| r.loss.total())
    }

    pub fn curve_csv(&self) -> String {
        curve_csv(&self.curve)
    }

    pub fn epochs_csv(&self) -> String {
        epochs_csv(&self.epochs)
    }
}

pub const CURVE_HEADER: &str = "step,epoch,lr,total,l_c,l_l,l_v,l_u,grad_norm";
pub const EPOCHS_HEADER: &str = "epoch,mean_loss,val_metric";

/// CSV of a per-step curve, one row per record.
pub fn curve_csv(curve: &[StepRecord]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for r in curve {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.epoch,
            r.lr,
            r.loss.total(),
            opt(r.loss.l_c),
            opt(r.loss.l_l),
            opt(r.loss.l_v),
            opt(r.loss.l_u),
            r.grad_norm
        ));
    }
    s
}

/// CSV of per-epoch summaries.
pub fn epochs_csv(epochs: &[EpochRecord]) -> String {
    let mut s = format!("{EPOCHS_HEADER}\n");
    for e in epochs {
        s.push_str(&format!(
            "{},{},{}\n",
            e.epoch,
            e.mean_loss,
            e.val_metric.map_or(String::new(), |x| format!("{x}"))
        ));
    }
    s
}

/// Mean objective loss over `val` in fixed-order batches.
pub fn validation_loss(
    model: &GroundedModel,
    val: &GroundedDataset,
    vokens: Option<&[Vec<u32>]>,
    batch_size: usize,
) -> Result<f64> {
    let idx: Vec<usize> = (0..val.len()).collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let gb = GroundedBatch::from_indices(val, chunk)?;
        let vok = vokens.map(|v| batch_vokens(v, chunk, gb.tokens.seq_len));
        let tape = Tape::new();
        let bound = model.lm.params.bind_frozen(&tape);
        sum += model.grounded_loss(&bound, &gb, vok.as_deref())?.total().item() * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(sum / n as f64)
}

/// Trains on captions only for `config.epochs` epochs.
pub fn train_grounded(
    model: GroundedModel,
    config: &TrainConfig,
    grounded: &GroundedDataset,
    val: Option<&GroundedDataset>,
    vokens: Option<&VokenTable>,
) -> Result<TrainOutcome> {
    let mut data = TrainData::grounded(grounded, val);
    data.vokens = vokens;
    let mut t = Trainer::new(model, config, data)?;
    t.run()?;
    Ok(t.finish())
}

/// Trains on `L_m = L_g + λ_u·L_u` with one grounded and one ungrounded
/// batch per step.
pub fn train_mixed(
    model: GroundedModel,
    config: &TrainConfig,
    data: TrainData<'_>,
    lambda_u: f64,
) -> Result<TrainOutcome> {
    if !data.is_mixed() {
        return Err(TrainError::Config("mixed training needs ungrounded text".into()));
    }
    let mut t = Trainer::new(model, config, data)?.with_lambda_u(lambda_u);
    t.run()?;
    Ok(t.finish())
}
