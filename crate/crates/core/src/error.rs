use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("unknown modality id {0}")]
    UnknownModality(u32),

    #[error("training diverged at {context}: non-finite value in {what}")]
    Divergence { context: String, what: String },

    #[error("cannot transfer encoder: field `{field}` differs ({detail})")]
    Transfer { field: String, detail: String },

    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures while decoding a binary volume or checkpoint file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unknown modality id {0}")]
    UnknownModality(u32),
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
}

impl Error {
    pub fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension { axis: axis.into(), detail: detail.into() }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
