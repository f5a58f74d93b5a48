use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The backtracking step parameter grew past its ceiling, which signals a
    /// badly scaled or non-finite subproblem.
    #[error("{phase}-update of layer {layer}: step parameter {value:e} exceeded ceiling")]
    StepCeiling {
        phase: &'static str,
        layer: usize,
        value: f64,
    },

    #[error("non-finite value after the {phase} phase (layer {layer})")]
    NonFinite { phase: &'static str, layer: usize },

    #[error("worker failure: {0}")]
    Worker(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("codec: {0}")]
    Codec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
