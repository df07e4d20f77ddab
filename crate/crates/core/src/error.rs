use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: wrong lengths, empty arrays, invalid configuration.
    #[error("usage error: {0}")]
    Usage(String),

    /// A parameter outside its mathematical domain (non-positive variance, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Every log weight is negative infinity.
    #[error("degenerate weights: all entries are -inf")]
    DegenerateWeights,

    /// The particle population lost all of its mass at `step` (1-based).
    #[error("particle collapse at step {step}: every incremental weight is zero")]
    Collapse { step: usize },

    /// The requested estimator variant does not apply to the inputs.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Stochastic optimization produced a non-finite objective.
    #[error("training diverged at step {step}")]
    Divergence {
        step: usize,
        history: Box<crate::trainer::TrainHistory>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
