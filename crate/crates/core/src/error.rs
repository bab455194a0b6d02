use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the detector lab.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, range, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid run configuration; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// A box collapsed to zero area after clipping.
    #[error("degenerate box after clipping: ({x1}, {y1}, {x2}, {y2})")]
    Degenerate { x1: f64, y1: f64, x2: f64, y2: f64 },

    /// A head output that the variant (or its loss weights) does not provide.
    #[error("output unavailable: {0}")]
    Unavailable(String),

    /// Pearson correlation of a constant vector.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// Annotation or manifest file does not follow the schema.
    #[error("schema violation in {record}: {reason}")]
    Schema { record: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn schema(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            record: record.into(),
            reason: reason.into(),
        }
    }
}
