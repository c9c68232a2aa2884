use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SrusError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SrusError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("block at (row {row}, col {col}): {source}")]
    Block {
        row: usize,
        col: usize,
        #[source]
        source: Box<SrusError>,
    },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<SrusError>,
    },

    #[error("unknown {kind} strategy `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl SrusError {
    pub fn config(msg: impl Into<String>) -> Self {
        SrusError::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        SrusError::Input(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        SrusError::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        SrusError::Numeric(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        SrusError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SrusError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        SrusError::Json {
            path: path.into(),
            source,
        }
    }

    /// True when the root cause is a numerical failure (SVD non-convergence,
    /// non-finite values), as opposed to bad input or I/O.
    pub fn is_numeric(&self) -> bool {
        match self {
            SrusError::Numeric(_) => true,
            SrusError::Block { source, .. } | SrusError::Frame { source, .. } => {
                source.is_numeric()
            }
            _ => false,
        }
    }

    /// True for configuration/usage mistakes.
    pub fn is_usage(&self) -> bool {
        matches!(self, SrusError::Config(_) | SrusError::UnknownStrategy { .. })
    }
}
