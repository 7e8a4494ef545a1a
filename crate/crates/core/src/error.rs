//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A value that must be finite was NaN or infinite.
    #[error("{op}: non-finite value encountered")]
    Numeric { op: &'static str },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value is outside its documented domain (e.g. token id >= vocab).
    #[error("domain: {0}")]
    Domain(String),

    /// A quantity that must be nonzero vanished (e.g. a zero preservation
    /// gradient in the dual closed form).
    #[error("singularity: {0}")]
    Singularity(String),

    /// Training diverged; reports the offending step.
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    /// Adapter merge failed; names the first mismatching layer.
    #[error("merge: {0}")]
    Merge(String),

    /// A persisted artifact failed integrity checks; names the field.
    #[error("corrupt checkpoint: {field}: {detail}")]
    Corruption { field: String, detail: String },

    /// A run configuration failed validation.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
