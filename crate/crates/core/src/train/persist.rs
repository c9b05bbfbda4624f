//! Saving and restoring trained models and their loop state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::trainer::TrainState;
use super::{Result, TrainError};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ModelConfig, ParamStore};
use crate::objectives::{GroundedModel, ObjectiveConfig};

pub const META_FORMAT: &str = "lcg-model";
pub const META_VERSION: u32 = 1;

/// JSON metadata stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub feature_dim: usize,
    pub n_vokens: usize,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainState>,
}

impl CheckpointMeta {
    pub fn for_model(model: &GroundedModel, config_hash: &str, train: Option<TrainState>) -> Self {
        Self {
            format: META_FORMAT.into(),
            version: META_VERSION,
            model: model.lm.config.clone(),
            objective: model.objective.clone(),
            feature_dim: model.feature_dim,
            n_vokens: model.voken.map_or(0, |v| v.n_vokens),
            config_hash: config_hash.into(),
            train,
        }
    }
}

/// Builds the checkpoint for `params` (the model's own or a snapshot of
/// the same layout), with the optimizer moments as the state block.
pub fn to_checkpoint(
    model: &GroundedModel,
    params: &ParamStore,
    config_hash: &str,
    train: Option<(TrainState, &AdamState)>,
) -> Checkpoint {
    let meta = CheckpointMeta::for_model(model, config_hash, train.map(|t| t.0));
    let json = serde_json::to_string(&meta).expect("metadata serializes");
    let state = train.map_or_else(Vec::new, |t| t.1.to_bytes());
    Checkpoint::from_store(params, json, state)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let io = |e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    ck.write_to(&mut w)?;
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(Checkpoint::read_from(&mut BufReader::new(f))?)
}

/// A model rebuilt from a checkpoint, with whatever loop state it carried.
pub struct LoadedModel {
    pub model: GroundedModel,
    pub meta: CheckpointMeta,
    pub optimizer: Option<AdamState>,
}

pub fn model_from_checkpoint(ck: Checkpoint) -> Result<LoadedModel> {
    let meta: CheckpointMeta =
        serde_json::from_str(&ck.meta).map_err(|e| TrainError::Checkpoint(format!("bad metadata: {e}")))?;
    if meta.format != META_FORMAT || meta.version != META_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported checkpoint metadata {} v{}",
            meta.format, meta.version
        )));
    }
    let state = ck.state.clone();
    let store = ck.into_store();
    let model = GroundedModel::from_params(
        meta.model.clone(),
        meta.objective.clone(),
        meta.feature_dim,
        meta.n_vokens,
        store,
    )?;
    let optimizer = if state.is_empty() {
        None
    } else {
        Some(
            AdamState::from_bytes(&model.lm.params, &state)
                .ok_or_else(|| TrainError::Checkpoint("optimizer state has the wrong size".into()))?,
        )
    };
    Ok(LoadedModel { model, meta, optimizer })
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    model_from_checkpoint(read_checkpoint(path)?)
}
