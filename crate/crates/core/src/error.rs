use thiserror::Error;

/// Errors raised by the spectral operators, integrators and estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate noise: {0}")]
    DegenerateNoise(String),

    #[error("numerical blow-up at step {step} (t = {time}): |AX| = {norm:e} exceeds guard {guard:e}")]
    BlowUp {
        step: usize,
        time: f64,
        norm: f64,
        guard: f64,
    },

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("control construction failed: {0}")]
    ConstructionFailed(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
