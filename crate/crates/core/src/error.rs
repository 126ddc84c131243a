//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero vector: L2 norm {norm:e} is below 1e-12")]
    ZeroVector { norm: f64 },

    #[error("temperature must be strictly positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("loss function is not deterministic: {first} vs {second} at identical parameters")]
    NonDeterministicLoss { first: f64, second: f64 },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("unknown memory bank slot {0}")]
    UnknownSlot(u64),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("imbalance ratio must be >= 1, got {0}")]
    InvalidLambda(f64),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("empty sample set: {0}")]
    EmptySet(&'static str),

    #[error("empty prediction log")]
    EmptyLog,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),

    #[error("training aborted at step {step}: {source}")]
    StepFailed {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
