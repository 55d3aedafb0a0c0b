//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A recorded computation produced a NaN or infinity. The node index
    /// identifies the first offending operation on the tape.
    #[error("non-finite value at tape node {node} ({op})")]
    NonFiniteNode { node: usize, op: &'static str },

    /// Closed-loop state left the guard region during integration.
    #[error("rollout diverged at t = {t} s (state norm exceeded {guard:e})")]
    RolloutDiverged { t: f64, guard: f64 },

    /// Inverse Hessian of the potential is undefined: p < 2 with no
    /// quadratic smoothing at a zero coordinate.
    #[error("singular potential Hessian at coordinate {index} (p = {p}, epsilon = 0)")]
    SingularHessian { index: usize, p: f64 },

    #[error("singular mass matrix (pivot {pivot:e} at row {row})")]
    SingularMass { row: usize, pivot: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A loss or gradient became non-finite outside of any single tape node
    /// (e.g. an aggregate across rollouts).
    #[error("non-finite result: {0}")]
    NonFinite(String),

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
