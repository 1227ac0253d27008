use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input at row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("event in sequence '{seq_id}' (row {row}) lies outside the window: {detail}")]
    OutOfWindow {
        seq_id: String,
        row: usize,
        detail: String,
    },

    #[error("duplicate timestamp t={t} in sequence '{seq_id}' (row {row})")]
    DuplicateEvent { seq_id: String, t: f64, row: usize },

    #[error("incomplete covariate grid: expected {expected} cells, found {found}")]
    IncompleteGrid { expected: usize, found: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-positive intensity {value} at event {event}")]
    NonPositiveIntensity { value: f64, event: String },

    #[error("singular score: intensity is zero at {0}")]
    SingularScore(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("thinning bound violated after {retries} retries (lambda {lambda} > bound {bound})")]
    BoundViolation {
        retries: usize,
        lambda: f64,
        bound: f64,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category label used by the CLI's error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedRow { .. }
            | Error::OutOfWindow { .. }
            | Error::DuplicateEvent { .. }
            | Error::IncompleteGrid { .. } => "input",
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => "numeric",
            Error::InvalidArgument(_) | Error::Shape(_) => "argument",
            Error::NonPositiveIntensity { .. } | Error::SingularScore(_) => "model",
            Error::BoundViolation { .. } => "sampler",
            Error::UndefinedMetric(_) => "metric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
        }
    }
}
