use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Closed forms are only available for increasing Weibull hazards (shape > 1).
    #[error("unsupported branch: {0}")]
    UnsupportedBranch(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("record {record}: {message}")]
    Evaluation { record: String, message: String },

    #[error("record {record}: selection probability {p:e} is too close to zero")]
    NearZeroSelection { record: String, p: f64 },

    #[error("no events observed; the shape parameter is not identifiable")]
    ShapeUnidentifiable,

    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:e}): {message}")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        message: String,
        /// Best parameter vector reached, on the natural scale when known.
        best: Vec<f64>,
    },

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("covariance matrix is not positive semidefinite")]
    NotPositiveSemidefinite,

    #[error("optimization failure: {0}")]
    OptimizationFailure(String),

    #[error("empty selection: no community member was referred")]
    EmptySelection,

    #[error("{failed} of {total} replicates failed (limit {limit:.0}%)")]
    TooManyFailures { failed: usize, total: usize, limit: f64 },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for errors raised by the numerical fitting machinery rather than bad input.
    pub fn is_convergence(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::Singular(_)
                | Error::OptimizationFailure(_)
                | Error::NearZeroSelection { .. }
                | Error::TooManyFailures { .. }
                | Error::Evaluation { .. }
        )
    }
}
