use thiserror::Error;

use crate::geometry::Hyperbox;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("linear predicate has a zero normal vector")]
    ZeroNormal,

    #[error("unknown environment `{name}` (available: {available})")]
    UnknownEnv { name: String, available: String },

    #[error("state {0:?} lies outside every mode region")]
    NoMode(Vec<f64>),

    #[error("no shield component matches state {0:?}")]
    NoComponent(Vec<f64>),

    #[error("component index {index} out of range (shield has {len})")]
    BadIndex { index: usize, len: usize },

    #[error("invalid shield: {0}")]
    InvalidShield(String),

    #[error("initial states not coverable: {0:?}")]
    NotCoverable(Hyperbox),

    #[error("component not safely imitable")]
    NotImitable,

    #[error("safety violation: {0}")]
    SafetyViolation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, got })
    }
}
