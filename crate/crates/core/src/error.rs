use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed npy data: {0}")]
    Npy(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("channel count mismatch for record '{image_id}': dataset has C={expected}, file has C={found}")]
    ChannelMismatch {
        image_id: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("class {class_id} has no training images")]
    EmptyClass { class_id: usize },

    #[error("cannot form {k} clusters from {n} features; use a smaller K")]
    TooFewFeatures { k: usize, n: usize },

    #[error("prototype bank has no entry for classes {0:?}")]
    MissingBankEntries(Vec<usize>),

    #[error("metric undefined: {0}")]
    EmptyMetrics(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
