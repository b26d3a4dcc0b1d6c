use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// An iterative routine ran out of iterations. `last` is the final
    /// iterate (a vector for power iteration, simplex weights for the
    /// min-norm solvers) and `residual` the last convergence measure.
    #[error("{routine} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        routine: &'static str,
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("trace is stale: it was produced for a different model state or batch")]
    StaleTrace,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    /// A failure inside a training step.
    #[error("step {step}: {source}")]
    AtStep { step: usize, source: Box<Error> },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// The error with any step context removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
