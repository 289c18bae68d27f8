use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid condition number {0}: kappa must be >= 1")]
    InvalidKappa(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("negative threshold {0}")]
    NegativeThreshold(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("SNR is undefined for a signal with A*x = 0")]
    DegenerateSignal,

    #[error("power iteration did not converge after {iters} iterations (last relative change {change:e})")]
    NoConvergence { iters: usize, change: f64 },

    #[error("matrix has a zero column at index {0}")]
    ZeroColumn(usize),

    #[error("all ground-truth vectors are zero; NMSE is undefined")]
    ZeroTruth,

    #[error("rate fit needs at least 3 points, got {0}")]
    DegenerateFit(usize),

    #[error("lighting matrix must have rank 3 with q >= 4 lights: {0}")]
    RankDeficientLighting(String),

    #[error("recovered normal is zero")]
    ZeroNormal,

    #[error("vector {index} is not unit length (norm {norm})")]
    NonUnitVector { index: usize, norm: f64 },

    #[error("trace does not match parameters: {0}")]
    StaleTrace(String),

    #[error("training diverged in stage {stage} ({phase}): validation loss is not finite; try a smaller lr_init")]
    Diverged { stage: usize, phase: String },

    #[error("no trained checkpoint for method `{0}`")]
    MissingCheckpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad archive {path}: {reason}")]
    Archive { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, dimensions, parameters)
    /// rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidDimension(_)
                | Error::InvalidKappa(_)
                | Error::InvalidParameter(_)
                | Error::NegativeThreshold(_)
                | Error::Config(_)
                | Error::RankDeficientLighting(_)
        )
    }
}
