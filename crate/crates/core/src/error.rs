use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::data::DatasetError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("unsupported absorption: {0}")]
    UnsupportedAbsorption(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("nothing to analyze: {0}")]
    NothingToAnalyze(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            Error::Precondition(_) => 4,
            Error::ModelMismatch(_) => 5,
            Error::NothingToAnalyze(_) => 6,
            _ => 2,
        }
    }
}
