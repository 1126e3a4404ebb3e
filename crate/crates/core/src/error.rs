use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank-deficient design in cell {cell}: {detail}")]
    RankDeficient { cell: String, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no convergence after {iterations} iterations (last change {gap:.3e})")]
    NonConvergence { iterations: usize, gap: f64 },

    #[error("log-likelihood decreased by {decrease:.3e} at iteration {iteration}")]
    LikelihoodDecrease { iteration: usize, decrease: f64 },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code for command-line front ends: 1 for bad input,
    /// 2 for numerical failures and 3 for non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Dimension(_) => 1,
            Error::RankDeficient { .. } | Error::Numerical(_) | Error::LikelihoodDecrease { .. } => 2,
            Error::NonConvergence { .. } => 3,
        }
    }
}
