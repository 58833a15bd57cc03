//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("unsupported kernel for gradient check: {0}")]
    UnsupportedKernel(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("training diverged (non-finite loss) at step {step}")]
    Training { step: usize },

    #[error("cache ordering error: position {position} not after {last} (layer {layer}, head {head})")]
    CacheOrdering {
        layer: usize,
        head: usize,
        position: usize,
        last: usize,
    },

    #[error("cache stats undefined: no entries appended")]
    EmptyCacheStats,

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("missing trace data for policy: {0}")]
    MissingTrace(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
