use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("search space is empty under the requested constraints")]
    EmptySpace,

    #[error("input resolution {resolution} is incompatible with total stride {stride}")]
    Resolution { resolution: usize, stride: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no subnet is active")]
    NoActiveSubnet,

    #[error("non-finite loss in term `{term}`: {value}")]
    NonFinite { term: String, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("budget infeasible: smallest architecture needs {needed_m:.2}M OPs, budget is {budget_m:.2}M")]
    BudgetInfeasible { needed_m: f64, budget_m: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("space id mismatch: architecture is for `{arch}`, checkpoint is for `{checkpoint}`")]
    SpaceMismatch { arch: String, checkpoint: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Io { .. } => 3,
            Error::NonFinite { .. } => 4,
            _ => 2,
        }
    }
}
