use thiserror::Error;

use crate::empc::EmpcStepResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration; the message names the offending config path.
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("rank-deficient regressor: the {basis} basis is collinear with the others")]
    RankDeficient { basis: &'static str },

    #[error("value iteration did not converge after {sweeps} sweeps (residual {residual:e})")]
    NotConverged { sweeps: usize, residual: f64 },

    #[error("no feasible plan found (storage violation {storage:e} m3, release violation {release:e} m3/s)")]
    Infeasible {
        storage: f64,
        release: f64,
        best: Box<EmpcStepResult>,
    },

    #[error("missing trained artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Errors caused by bad user input (as opposed to a failing computation).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Parse { .. } | Error::InvalidArgument(_) | Error::Json(_)
        )
    }
}
