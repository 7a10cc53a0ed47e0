use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: expected {expected} bytes of payload, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown layer `{0}`")]
    Layer(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
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
}
