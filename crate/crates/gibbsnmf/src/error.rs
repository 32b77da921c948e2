use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's stated contract (dimensions, domains,
    /// invalid model combinations, missing state).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Malformed or inconsistent input data, with location diagnostics where
    /// available.
    #[error("data error: {0}")]
    Data(String),
    /// An iterative numerical routine exhausted its budget; the message
    /// carries diagnostics of the offending target.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A per-element conditional has no likelihood information for this
    /// factor (excluded, or zero coefficients under an Exponential prior);
    /// callers should fall back to a prior draw.
    #[error("factor {0} carries no likelihood information; sample from the prior instead")]
    ExcludedFactor(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}
