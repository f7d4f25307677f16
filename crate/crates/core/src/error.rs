use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The Poisson-mixture series is refused above the noncentrality limit.
    #[error("noncentrality {0} exceeds the series limit of 1e6; use the Sankaran approximation")]
    NoncentralityTooLarge(f64),

    /// No unconsumed candidate is left. Normal termination in pool mode.
    #[error("candidate set exhausted")]
    Exhausted,
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for errors caused by bad input rather than by the computation.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidArgument(_))
    }
}
