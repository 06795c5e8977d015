use std::path::PathBuf;

use thiserror::Error;
use vdgae_tape::TapeError;

use crate::train::EpochRecord;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("feature matrix has {found} rows but the graph has {expected} nodes")]
    FeatureRows { expected: usize, found: usize },
    #[error("node features are required but none are attached")]
    MissingFeatures,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("requested {requested} negative edges but only {available} non-edges exist")]
    NotEnoughNonEdges { requested: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    Diverged {
        epoch: usize,
        detail: String,
        history: Vec<EpochRecord>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
