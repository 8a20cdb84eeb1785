use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("corrupt data in {path}: {reason}")]
    CorruptData { path: PathBuf, reason: String },

    #[error("degenerate long-tail spec: {0}")]
    DegenerateSpec(String),

    #[error("insufficient samples for class {class}: requested {requested}, available {available}")]
    InsufficientSamples {
        class: String,
        requested: usize,
        available: usize,
    },

    #[error("insufficient batch: {0}")]
    InsufficientBatch(String),

    #[error("numerical instability: {0}")]
    NumericalInstability(String),

    #[error("training diverged at step {step}: loss `{loss}` is not finite")]
    Diverged { step: u64, loss: String },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("undefined deviation for class {0}: training count is zero")]
    UndefinedDeviation(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
