//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The scenario cannot be realized (for example, arrivals exceed storage).
    #[error("scenario error: {0}")]
    Scenario(String),

    /// A client cannot finish its upload before the round deadline.
    #[error("client infeasible: {0}")]
    InfeasibleClient(String),

    /// A runtime invariant (bandwidth budget, round deadline) was broken.
    #[error("constraint violated: {0}")]
    ConstraintViolation(String),

    /// The experiment configuration failed validation. Each entry names a key path.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
