use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants mirror the failure classes the command line maps onto exit
/// codes: configuration/argument problems, data problems, and numerical
/// failures during training or sampling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("distillation error: {0}")]
    Distillation(String),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("demo generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("{path}: record {record}: {reason}")]
    Format {
        path: PathBuf,
        record: usize,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
