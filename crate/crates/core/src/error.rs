use thiserror::Error;

/// Errors raised by the analysis engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("malformed input at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid outcome {value:?} at line {line}: outcomes must be 0 or 1")]
    NonBinaryOutcome { line: usize, value: String },

    #[error("matched set {set_id:?}: set size < 2")]
    SetTooSmall { set_id: String },

    #[error("duplicate unit in matched set {set_id:?}: {msg}")]
    Duplicate { set_id: String, msg: String },

    #[error("matched set {set_id:?} has tied doses and strict tie mode is on")]
    TiedDoses { set_id: String },

    #[error("design is empty")]
    EmptyDesign,

    #[error("enumeration cap exceeded: {what} ({size} > {cap})")]
    CapExceeded { what: String, size: u128, cap: u128 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
