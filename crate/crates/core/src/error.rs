use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the distinct failure classes the
/// CLI reports: input parsing, model/graph validation, and numerical trouble.
#[derive(Debug, Error)]
pub enum Error {
    /// Graph construction or edge bookkeeping violated an invariant.
    #[error("invalid graph: {0}")]
    Graph(String),

    /// Model specification rejected before any numerics ran.
    #[error("invalid model: {0}")]
    Model(String),

    /// An area ended up with no active neighbours while rho is pinned near 1,
    /// where the conditional autoregression for that area degenerates.
    #[error("area {area} has no active neighbours under fixed rho {rho}")]
    IsolatedArea { area: usize, rho: f64 },

    /// Matrix factorization failure, NaN objective, or a degenerate
    /// conditional distribution.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An iterative routine hit its cap without meeting its tolerance.
    #[error("{context} did not converge within {iterations} iterations")]
    NonConvergence {
        context: &'static str,
        iterations: usize,
    },

    /// A statistic has no defined value for the given input (for example
    /// Moran's I with zero variance or no active edges).
    #[error("undefined statistic: {0}")]
    Undefined(String),

    /// Failure inside the adaptive loop, carrying the iteration log recorded
    /// up to that point so a partial run stays auditable.
    #[error("adaptive estimation failed after {states} recorded states: {source}\n{trace_log}")]
    Adaptive {
        states: usize,
        trace_log: String,
        source: Box<Error>,
    },

    /// Text input rejected, with the file and 1-based line that failed.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: &std::path::Path, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
