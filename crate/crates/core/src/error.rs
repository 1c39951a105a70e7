//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by system validation, estimation, synthesis and simulation.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector does not have the shape the surrounding structure
    /// requires.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: String,
        got: String,
    },

    /// A per-step sequence has the wrong number of entries for the horizon.
    #[error("horizon mismatch in {what}: expected {expected} entries, got {got}")]
    HorizonMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    /// A step index lies outside the decision horizon.
    #[error("step index {t} outside horizon 0..{horizon}")]
    IndexOutOfHorizon { t: usize, horizon: usize },

    /// A covariance or weight matrix failed a symmetry / definiteness check.
    #[error("invalid matrix for {what}: {detail}")]
    InvalidMatrix { what: String, detail: String },

    /// A numeric routine (factorization, eigensolve, inversion) failed.
    #[error("numerical failure in {0}")]
    NumericalFailure(String),

    /// The control curvature Ru + B'PB at step `t` is singular, so the
    /// backward value recursion cannot produce a control law.
    #[error("singular control curvature in backward pass at step {t}")]
    SingularRiccati { t: usize },

    /// The control channel at step `t` cannot reach the requested target
    /// (B has deficient rank); `residual` is the unreachable component norm.
    #[error("rank-deficient control channel at step {t} (residual {residual:.3e})")]
    RankDeficient { t: usize, residual: f64 },

    /// Parameter binding was attempted on a strategy that is already bound.
    #[error("strategy is already bound")]
    AlreadyBound,

    /// A strategy operation required a bound strategy but got a
    /// parameterized one.
    #[error("strategy is parameterized; bind targets before evaluating")]
    NotBound,

    /// A parameter vector has the wrong number of entries.
    #[error("parameter length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    /// An output-density estimate was queried before absorbing any samples
    /// and no prior was supplied.
    #[error("output density estimate is empty and no prior was provided")]
    EmptyDensity,

    /// The normal-equation system of the exact-strategy oracle is singular.
    #[error("singular normal equations in exact strategy oracle")]
    SingularNormalEquations,

    /// The covariance of the observed functionals in a Gaussian
    /// conditioning step is not positive definite, so the conditional law
    /// is not well defined for arbitrary observed values.
    #[error("singular observation covariance in Gaussian conditioning")]
    SingularObservationCovariance,

    /// An iterative procedure stopped before meeting its tolerance.
    #[error("no convergence: last update {delta:.3e} above tolerance {tol:.3e}")]
    NonConvergence { delta: f64, tol: f64 },

    /// Configuration file is syntactically or semantically invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// Strategy or report file round-trip failure.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Convenience constructor for dimension mismatches.
    pub fn dim(what: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Convenience constructor for invalid-matrix errors.
    pub fn matrix(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidMatrix {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
