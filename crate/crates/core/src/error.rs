//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad kernel size, impossible scenario, malformed file, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A gradient-tape contract was violated (e.g. backward on a non-scalar).
    #[error("autodiff contract violation: {0}")]
    Autodiff(String),

    /// Training aborted because the loss exploded or went non-finite.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    /// A generated twin scenario failed the core-vs-surrounding separability check.
    #[error("twin separability rejected for seed {seed}: core/surround ratio {ratio} exceeds {limit}")]
    TwinSeparability { seed: u64, ratio: f64, limit: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A binary container or scenario file is malformed.
    #[error("file format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
