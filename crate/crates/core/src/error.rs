use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("non-deterministic computation: {0}")]
    NonDeterministic(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}
