use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is singular within tolerance")]
    SingularMatrix,
    #[error("invalid time step {0}; must be positive")]
    InvalidDelta(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("numerical instability: {0}")]
    NumericalInstability(String),
    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },
    #[error("window/hop pair violates the overlap-add condition (min envelope {0:e})")]
    ColaViolation(f64),
    #[error("insufficient data: {frames} frames for {bins} bins")]
    InsufficientData { frames: usize, bins: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),
    #[error("reference signal is identically zero")]
    ZeroReference,
    #[error("input has zero power")]
    ZeroPowerInput,
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint does not match the processing path: {0}")]
    ConfigMismatch(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigMismatch(_) | Error::ColaViolation(_) => 2,
            Error::SingularMatrix
            | Error::InvalidDelta(_)
            | Error::NumericalInstability(_)
            | Error::NonFiniteActivation(_) => 4,
            _ => 3,
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}
