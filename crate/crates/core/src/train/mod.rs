//! Optimization: the AdamW loop for grounded-only and mixed training,
//! checkpoints with resumable state, the λ_u sweep and the ablations.

pub mod ablation;
pub mod config;
pub mod experiment;
pub mod optim;
pub mod persist;
pub mod sweep;
pub mod trainer;


use std::path::PathBuf;

use thiserror::Error;

pub use ablation::{ablation_config, Ablation};
pub use config::{DataConfig, ExperimentConfig, Scenario, TrainConfig, LAMBDA_U_GRID};
pub use experiment::{build_voken_table, run_experiment, trainer_for, ExperimentData};
pub use optim::{adamw_step, lr_at, AdamState, AdamWConfig};
pub use persist::{load_model, model_from_checkpoint, read_checkpoint, to_checkpoint, write_checkpoint, CheckpointMeta, LoadedModel};
pub use sweep::{select_lambda_u, sweep_lambda_u, SweepResult, SweepRow};
pub use trainer::{
    curve_csv, epochs_csv, running_min, train_grounded, CURVE_HEADER, EPOCHS_HEADER, train_mixed, EpochRecord, StepRecord, TrainData, TrainOutcome, TrainState, Trainer,
    VokenTable,
};

use crate::data::DataError;
use crate::eval::EvalError;
use crate::model::ModelError;
use crate::objectives::ObjectiveError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step} (epoch {epoch}): {detail}")]
    Diverged { step: u64, epoch: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
