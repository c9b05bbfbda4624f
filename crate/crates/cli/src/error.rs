use lcg_core::data::DataError;
use lcg_core::eval::EvalError;
use lcg_core::model::ModelError;
use lcg_core::objectives::ObjectiveError;
use lcg_core::train::TrainError;
use thiserror::Error;

/// Failure of a command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, missing or malformed inputs: exit 2.
    #[error("{0}")]
    Usage(String),
    /// Divergence or another numerical failure: exit 3.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { step, epoch, detail } => {
                Self::Numeric(format!("training diverged at step {step} (epoch {epoch}): {detail}"))
            }
            TrainError::Eval(e) => e.into(),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UndefinedCorrelation => Self::Numeric(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        Self::Usage(e.to_string())
    }
}
