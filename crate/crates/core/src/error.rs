use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, channel counts, checkpoint/architecture mismatch
    /// or an invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied data outside the accepted domain (e.g. an identity
    /// label beyond the lookup table).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// A metric whose value is mathematically undefined for the given data.
    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// A training-time contract (such as the freeze ledger) was broken.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver: configuration
    /// problems are usage errors (2), everything else is a runtime failure (1).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
