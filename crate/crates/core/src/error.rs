use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box [{x0}, {y0}, {x1}, {y1}]")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("invalid image size {width}x{height}")]
    InvalidImageSize { width: u32, height: u32 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {context}: {reason}")]
    Format { context: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("failed to load task {task_id}: {reason}")]
    TaskLoad { task_id: String, reason: String },

    #[error("unknown query token {0:?}")]
    UnknownToken(String),

    #[error("malformed expression {0:?}")]
    MalformedExpression(String),

    #[error("scene generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            reason: reason.into(),
        }
    }
}
