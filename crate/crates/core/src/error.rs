use thiserror::Error;

/// Errors raised by model construction, the estimators and the oracles.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported modulation order {0}, expected one of 4, 16, 64")]
    UnsupportedOrder(usize),
    #[error("orthogonal pilot construction needs an even length, got {0}")]
    OddPilotLength(usize),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, Error>;
