use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("row {row} is fully masked; softmax is undefined")]
    DegenerateRow { row: usize },

    #[error("singular design: all x values are equal")]
    SingularDesign,

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("divergence detected in layer {layer}: {detail}")]
    Divergence { layer: usize, detail: String },

    #[error("allocation tracker is disabled; enable it before profiling")]
    ProfilingDisabled,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
