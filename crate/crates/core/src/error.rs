//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or hyperparameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value surfaced during simulation or differentiation.
    #[error("non-finite value in layer {layer} at step {step}: {what}")]
    NonFinite {
        layer: usize,
        step: usize,
        what: String,
    },

    #[error("privacy accounting error: {0}")]
    Accounting(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("spike file header error at byte {offset}: {msg}")]
    Header { offset: usize, msg: String },

    #[error("spike file payload error at byte {offset}: {msg}")]
    Payload { offset: usize, msg: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("run directory {} already exists (pass force to overwrite)", .0.display())]
    Collision(PathBuf),

    #[error("training diverged for client {client} in round {round}: {msg}")]
    Diverged {
        client: usize,
        round: usize,
        msg: String,
    },

    #[error("spec validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
