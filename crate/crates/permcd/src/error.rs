use thiserror::Error;

/// Errors produced by the library and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A computation lost enough accuracy that its result cannot be trusted.
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    /// A statistical estimate could not be formed from the available data.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// An experiment configuration file or flag set is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::NumericalDegeneracy(msg.into())
    }
}
