//! End-to-end runs: load data, build the model, assign vokens when the
//! objective needs them, and train.

use super::config::{DataConfig, ExperimentConfig, Scenario};
use super::trainer::{TrainData, TrainOutcome, Trainer, VokenTable};
use super::{Result, TrainError};
use crate::data::formats::{read_captions, read_features, CaptionRecord, FeatureMatrix};
use crate::data::synth::files;
use crate::data::{GroundedDataset, SyntheticCorpus, TextDataset, Tokenizer, TEXT_SEQ_LEN};
use crate::model::TokenBatch;
use crate::objectives::{voken_assign, GroundedModel, ObjectiveConfig, ObjectiveKind, VokenBank};
use crate::tensor::Tape;

/// Tokenized inputs of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub grounded: GroundedDataset,
    pub val_grounded: Option<GroundedDataset>,
    pub text: Option<TextDataset>,
    pub val_text: Option<TextDataset>,
    pub voken_bank: Option<VokenBank>,
}

fn cap_grounded(mut ds: GroundedDataset, max_tokens: Option<usize>) -> GroundedDataset {
    if let Some(cap) = max_tokens {
        let mut total = 0;
        let keep = ds
            .examples
            .iter()
            .take_while(|e| {
                let before = total;
                total += e.tokens.len();
                before < cap
            })
            .count();
        ds.examples.truncate(keep);
    }
    ds
}

fn cap_text(mut ds: TextDataset, max_tokens: Option<usize>) -> TextDataset {
    if let Some(cap) = max_tokens {
        ds.chunks.truncate(cap.div_ceil(TEXT_SEQ_LEN));
    }
    ds
}

impl ExperimentData {
    fn assemble(
        cfg: &DataConfig,
        tok: &Tokenizer,
        captions: &[CaptionRecord],
        val_captions: &[CaptionRecord],
        features: FeatureMatrix,
        bank: Option<FeatureMatrix>,
        text: Option<(&str, &str)>,
    ) -> Result<Self> {
        let grounded = cap_grounded(
            GroundedDataset::from_records(captions, features.clone(), tok)?,
            cfg.max_grounded_tokens,
        );
        let val_grounded = if val_captions.is_empty() {
            None
        } else {
            Some(GroundedDataset::from_records(val_captions, features, tok)?)
        };
        let (text, val_text) = match (cfg.scenario, text) {
            (Scenario::Mixed, Some((train, val))) => (
                Some(cap_text(TextDataset::from_text(train, tok, TEXT_SEQ_LEN), cfg.max_text_tokens)),
                Some(TextDataset::from_text(val, tok, TEXT_SEQ_LEN)),
            ),
            _ => (None, None),
        };
        let voken_bank = bank.map(VokenBank::new).transpose()?;
        Ok(Self {
            grounded,
            val_grounded,
            text,
            val_text,
            voken_bank,
        })
    }

    /// Reads the files of a generated data directory.
    pub fn load(cfg: &DataConfig, tok: &Tokenizer) -> Result<Self> {
        let captions = read_captions(&cfg.path(files::CAPTIONS))?;
        let val_path = cfg.path(files::VAL_CAPTIONS);
        let val = if val_path.exists() {
            read_captions(&val_path)?
        } else {
            Vec::new()
        };
        let features = read_features(&cfg.path(files::FEATURES))?;
        let bank_path = cfg.path(files::VOKEN_BANK);
        let bank = bank_path.exists().then(|| read_features(&bank_path)).transpose()?;
        let read = |f: &str| {
            std::fs::read_to_string(cfg.path(f)).map_err(|e| TrainError::Io {
                path: cfg.path(f),
                source: e,
            })
        };
        let text = match cfg.scenario {
            Scenario::Mixed => Some((read(files::TEXT_TRAIN)?, read(files::TEXT_VAL)?)),
            Scenario::Grounded => None,
        };
        Self::assemble(
            cfg,
            tok,
            &captions,
            &val,
            features,
            bank,
            text.as_ref().map(|(a, b)| (a.as_str(), b.as_str())),
        )
    }

    /// Same as [`Self::load`] for an in-memory corpus.
    pub fn from_corpus(cfg: &DataConfig, corpus: &SyntheticCorpus, tok: &Tokenizer) -> Result<Self> {
        Self::assemble(
            cfg,
            tok,
            &corpus.captions,
            &corpus.val_captions,
            corpus.features.clone(),
            Some(corpus.voken_bank.clone()),
            Some((&corpus.text_train, &corpus.text_val)),
        )
    }

    pub fn feature_dim(&self) -> usize {
        self.grounded.features.dim
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            grounded: &self.grounded,
            val_grounded: self.val_grounded.as_ref(),
            text: self.text.as_ref(),
            val_text: self.val_text.as_ref(),
            vokens: None,
        }
    }
}

/// Config of the matching model used to assign vokens: the same language
/// model with a grounding head trained on the top layer.
pub fn matcher_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut m = cfg.clone();
    m.objective = ObjectiveConfig {
        kind: ObjectiveKind::Lcg,
        sentence_clip_top_layer: false,
        ..cfg.objective.clone()
    };
    m.model.narrow_window = None;
    m.model.grounding_layer = m.model.n_layers.max(1);
    m.train.epochs = cfg.train.matcher_epochs;
    m.data.scenario = Scenario::Grounded;
    m
}

/// Vokens of every sequence in `seqs` under the matcher's top layer.
fn assign_all(matcher: &GroundedModel, bank: &VokenBank, seqs: &[&[u32]]) -> Result<Vec<Vec<u32>>> {
    let head = matcher.head.as_ref().expect("matcher has a grounding head");
    let adapter = matcher.adapter.as_ref().expect("matcher has an adapter");
    let top = matcher.lm.config.n_layers;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let batch = TokenBatch::from_sequences(chunk, crate::data::PAD);
        let tape = Tape::new();
        let bound = matcher.lm.params.bind_frozen(&tape);
        let fwd = matcher.lm.forward(&bound, &batch)?;
        let ids = voken_assign(head, adapter, &bound, fwd.acts.tap(top)?, bank, &batch)?;
        for (b, s) in chunk.iter().enumerate() {
            out.push(ids[b * batch.seq_len..b * batch.seq_len + s.len()].to_vec());
        }
    }
    Ok(out)
}

fn tokens(ds: &GroundedDataset) -> Vec<&[u32]> {
    ds.examples.iter().map(|e| e.tokens.as_slice()).collect()
}

fn chunks(ds: &TextDataset) -> Vec<&[u32]> {
    ds.chunks.iter().map(Vec::as_slice).collect()
}

/// Trains the matching model and assigns vokens to all training and
/// validation sequences.
pub fn build_voken_table(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<VokenTable> {
    let bank = data
        .voken_bank
        .as_ref()
        .ok_or_else(|| TrainError::Config("voken objectives need a voken bank".into()))?;
    let mcfg = matcher_config(cfg);
    let matcher = GroundedModel::build(mcfg.model.clone(), mcfg.objective.clone(), data.feature_dim(), 0, mcfg.train.seed)?;
    let mut td = data.train_data();
    td.text = None;
    td.val_text = None;
    let mut t = Trainer::new(matcher, &mcfg.train, td)?;
    t.run()?;
    let matcher = t.finish().model;
    Ok(VokenTable {
        captions: assign_all(&matcher, bank, &tokens(&data.grounded))?,
        val_captions: match &data.val_grounded {
            Some(v) => assign_all(&matcher, bank, &tokens(v))?,
            None => Vec::new(),
        },
        text: match &data.text {
            Some(t) => assign_all(&matcher, bank, &chunks(t))?,
            None => Vec::new(),
        },
        val_text: match &data.val_text {
            Some(t) => assign_all(&matcher, bank, &chunks(t))?,
            None => Vec::new(),
        },
    })
}

/// Builds the model and trainer for `cfg`; the caller drives the loop.
/// `vokens` must be supplied for voken objectives.
pub fn trainer_for<'a>(
    cfg: &ExperimentConfig,
    data: &'a ExperimentData,
    vokens: Option<&'a VokenTable>,
    lambda_u: Option<f64>,
) -> Result<Trainer<'a>> {
    cfg.validate()?;
    let n_vokens = data.voken_bank.as_ref().map_or(0, VokenBank::len);
    let model = GroundedModel::build(
        cfg.model.clone(),
        cfg.objective.clone(),
        data.feature_dim(),
        if cfg.objective.kind.uses_vokens() { n_vokens } else { 0 },
        cfg.train.seed,
    )?;
    let mut td = data.train_data();
    if cfg.data.scenario == Scenario::Grounded {
        td.text = None;
        td.val_text = None;
    }
    td.vokens = vokens;
    let t = Trainer::new(model, &cfg.train, td)?;
    Ok(match lambda_u {
        Some(l) => t.with_lambda_u(l),
        None => t,
    })
}

/// Trains `cfg` from scratch on `data`.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData, lambda_u: Option<f64>) -> Result<TrainOutcome> {
    let vokens = if cfg.objective.kind.uses_vokens() {
        Some(build_voken_table(cfg, data)?)
    } else {
        None
    };
    let mut t = trainer_for(cfg, data, vokens.as_ref(), lambda_u)?;
    t.run()?;
    Ok(t.finish())
}
