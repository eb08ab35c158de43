use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = McmsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum McmsError {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0}: produced or received non-finite values")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl McmsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        McmsError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        McmsError::Io {
            path: path.into(),
            source,
        }
    }
}
