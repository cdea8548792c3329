use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time grid does not cover the field of view: {0}")]
    Coverage(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("incomplete slice window: {0}")]
    Window(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("unknown wavelength {0} nm")]
    UnknownWavelength(f64),

    #[error("coordinate outside [0,1)^2: ({0}, {1})")]
    Domain(f64, f64),

    #[error("optimization diverged at iteration {iteration} (loss {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("no optimization performed (iterations = 0)")]
    NoOptimization,

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("extinction matrix is rank deficient (condition number {condition})")]
    Conditioning { condition: f64 },

    #[error("reference image is constant")]
    ConstantReference,

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(f64),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
