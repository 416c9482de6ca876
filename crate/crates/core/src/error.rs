use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid quantizer: {0}")]
    InvalidQuantizer(String),

    #[error("invalid run config: {0}")]
    InvalidRun(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A weight became NaN or infinite. `step` is the 1-based SGD step that produced it.
    #[error("trajectory diverged at step {step} (seed {seed})")]
    Diverged { step: usize, seed: u64 },

    #[error("stepsize condition violated: gamma = {gamma} >= {limit}")]
    StepsizeViolated { gamma: f64, limit: f64 },

    #[error("not enough seeds: need at least {needed}, got {got}")]
    NotEnoughSeeds { needed: usize, got: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid parameter path `{0}`")]
    InvalidPath(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
