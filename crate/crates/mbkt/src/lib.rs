//! Datasets, synthetic data, training, checkpoints and ablations for the
//! missing-modality fusion model in [`mbkt_core`].

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod split;
pub mod synth;
pub mod train;

pub use mbkt_core as core;

use checkpoint::CheckpointError;
use data::DataError;
use split::SplitError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Model(mbkt_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

impl From<mbkt_core::Error> for Error {
    fn from(e: mbkt_core::Error) -> Self {
        match e {
            mbkt_core::Error::NonFinite(what) => Error::Numeric(what.to_string()),
            other => Error::Model(other),
        }
    }
}

impl Error {
    /// Process exit code: 2 for data and configuration problems, 3 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
