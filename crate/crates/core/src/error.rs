use thiserror::Error;

use crate::trainer::ErrorTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed environment: {0}")]
    MalformedSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state {state} is not valid for this environment")]
    InvalidState { state: String },

    #[error("BFF window truncated: window {index} has no s_(m+2)")]
    TruncatedWindow { index: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{0} requires model access (resampling), which was not granted")]
    ModelAccessRequired(&'static str),

    #[error("primal-dual is not a single-gradient estimator; use primal_dual_step")]
    PrimalDualNotGradient,

    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("singular linear system")]
    Singular,

    #[error("trajectory too short: {usable} usable windows for batch size {batch_size}")]
    TrajectoryTooShort { usable: usize, batch_size: usize },

    #[error("diverged at step {step}: error {error:.3e} exceeds {limit:.3e}")]
    Diverged {
        step: usize,
        error: f64,
        limit: f64,
        trace: Box<ErrorTrace>,
    },

    #[error("smallest gap (|gap|={gap:.3e} at eps={eps}) is within 3 standard errors of noise (largest std_err={std_err:.3e}); increase the sample count")]
    InsufficientSamples { eps: f64, gap: f64, std_err: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn ensure_finite(x: f64, context: impl FnOnce() -> String) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { context: context() })
    }
}
