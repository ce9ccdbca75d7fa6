//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, empty ranges, degenerate splits).
    #[error("config error: {0}")]
    Config(String),

    /// A sampling spec is incompatible with the corpus it is drawn from.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Non-finite values or otherwise invalid numeric inputs.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse (out-of-range step, missing forward cache).
    #[error("usage error: {0}")]
    Usage(String),

    /// Held-out evaluation cannot proceed (e.g. too few contents for a pool).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Linear probe preconditions violated.
    #[error("probe error: {0}")]
    Probe(String),

    /// Training produced a non-finite loss or parameter.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized artifact is malformed or from an incompatible layout.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// True for errors caused by user-supplied configuration rather than runtime state.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Usage(_) | Error::Sampling(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
