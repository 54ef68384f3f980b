//! Language-model harness: configuration, data, training, evaluation and
//! checkpoint persistence.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::syntax::{SyntaxError, TreebankError};
use crate::tensor::TensorError;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod optim;
pub mod train;
pub mod vocab;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigFile, ModelConfig, Tokenization, TrainConfig, Variant};
pub use data::Dataset;
pub use eval::{evaluate, EvalMetrics};
pub use model::Model;
pub use train::{train, CurvePoint, TrainOutcome};
pub use vocab::Vocab;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("treebank/corpus alignment: {0}")]
    Alignment(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Treebank(#[from] TreebankError),
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for data and validation problems, 3 for
    /// numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Divergence { .. } => 3,
            _ => 2,
        }
    }
}

/// Reads a whole file, attaching the path to any error.
pub fn read_text(path: &std::path::Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}
