//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by data handling, simulation, modelling and decision code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("window bounds: t_split={t_split}, K={k}, T={t}")]
    WindowBounds { t_split: usize, k: usize, t: usize },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("environment initialisation: {0}")]
    OracleInit(String),

    #[error("mode mismatch: expected {expected}, found {found}")]
    ModeMismatch { expected: &'static str, found: &'static str },

    #[error("unsupported mode for {op}: {mode}")]
    UnsupportedMode { op: &'static str, mode: &'static str },

    #[error("training diverged at step {step}: loss={loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("missing phenotype for patient `{0}`")]
    MissingPhenotype(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
