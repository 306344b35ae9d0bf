//! Error type shared across the crate, with stable string codes for the
//! command-line tools and foreign-function bindings.

use thiserror::Error;

/// Everything that can go wrong across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch or an index out of range.
    #[error("shape error: {0}")]
    Shape(String),

    /// Matrix contents unusable (non-finite entries, broken invariants).
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    /// Riccati iteration failed to converge within the iteration cap.
    #[error("Riccati iteration did not converge within {iters} iterations (system may not be stabilizable)")]
    NotStabilizable { iters: usize },

    /// The gain equation's normal matrix was not positive definite.
    #[error("singular gain equation: R + B'PB is not positive definite")]
    SingularGain,

    /// A matrix that must have full rank does not.
    #[error("rank deficient: {0}")]
    RankDeficient(String),

    /// The designed reduced-order loop failed the closed-loop stability check.
    #[error("reduced closed loop is unstable (spectral radius {rho})")]
    ReducedLoopUnstable { rho: f64 },

    /// Analytic sensitivity construction requires a zero initial state.
    #[error("analytic sensitivities require x0 = 0; shift the state or use the finite-difference path")]
    UnsupportedInitialState,

    /// An abstract system evaluator failed.
    #[error("evaluator failure: {0}")]
    Eval(String),

    /// Iterative identification exceeded its divergence guard.
    #[error("gradient descent diverged: loss {loss} exceeded limit {limit}")]
    Diverged { loss: f64, limit: f64 },

    /// Malformed user input (flags, config values, file contents).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wrap an I/O error with the path it concerns (std errors carry none).
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Error {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    /// Stable machine-readable code, used by `--json-errors` and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidMatrix(_) => "invalid-matrix",
            Error::NotStabilizable { .. } => "not-stabilizable",
            Error::SingularGain => "singular-gain",
            Error::RankDeficient(_) => "rank",
            Error::ReducedLoopUnstable { .. } => "reduced-loop-unstable",
            Error::UnsupportedInitialState => "unsupported-initial-state",
            Error::Eval(_) => "eval",
            Error::Diverged { .. } => "diverged",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
