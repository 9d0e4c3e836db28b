use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two inputs that must agree in length or shape did not.
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A value fell outside the domain of a link or likelihood.
    #[error("domain violation: {0}")]
    Domain(String),

    /// A factorization or solve that should succeed mathematically did not.
    #[error("numerical breakdown: {0}")]
    Numerical(String),

    /// Every template lost its supporting events.
    #[error("degenerate dictionary: no template has supporting events")]
    DegenerateDictionary,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
