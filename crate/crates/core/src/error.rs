use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library. Messages are prefixed with the
/// module that produced them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("event_data: parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("event_data: invalid sequence at line {line}: {msg}")]
    Validation { line: usize, msg: String },

    #[error("event_data: {0}")]
    InvalidSequence(String),

    #[error("lognorm_mix: domain error: {0}")]
    Domain(String),

    #[error("lognorm_mix: degenerate fit: {0}")]
    Overflow(String),

    #[error("lognorm_mix: {0}")]
    Fit(String),

    #[error("ctx_attention: invalid config: {0}")]
    Config(String),

    #[error("ctx_attention: masking violation: history event at t={event_time} is not before query t={query_time}")]
    Masking { event_time: f64, query_time: f64 },

    #[error("ctx_attention: non-finite loss in sequence {sequence}")]
    NonFiniteLoss { sequence: usize },

    #[error("ctx_attention: {0}")]
    Shape(String),

    #[error("ctx_attention: training diverged in epoch {epoch}; the last finite snapshot was kept")]
    Diverged { epoch: usize },

    #[error("generative: intensity {intensity} exceeds upper bound {bound} at t={time}")]
    BoundViolation { time: f64, intensity: f64, bound: f64 },

    #[error("generative: {0}")]
    Sampler(String),

    #[error("inference: {0}")]
    Inference(String),

    #[error("metrics: length mismatch: {left} predictions vs {right} truths")]
    LengthMismatch { left: usize, right: usize },

    #[error("metrics: {0}")]
    Metric(String),

    #[error("cli: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
