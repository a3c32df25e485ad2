use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("graph generation failed after {attempts} attempts")]
    RetryBudgetExhausted { attempts: usize },

    #[error("network of {n} neurons exceeds the exact-chain limit of {max}")]
    SizeLimit { n: usize, max: usize },

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular derivative |1 - lambda| = {value:.3e} near a fold; use arc-length continuation")]
    SingularDerivative { value: f64 },

    #[error("no escape observed in {runs} runs of at most {max_steps} steps")]
    AllCensored { runs: usize, max_steps: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameters(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
