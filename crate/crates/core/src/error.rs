use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate box [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f64, f64, f64, f64),

    #[error("location ({x}, {y}) is not strictly inside the box")]
    LocationOutsideBox { x: f64, y: f64 },

    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutsideImage { x: f64, y: f64, width: usize, height: usize },

    #[error("empty normalization region")]
    EmptyRegion,

    #[error("gradients were already computed for this tape")]
    TapeConsumed,

    #[error("backward needs a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("the {0} pool is empty; drop that supervision form from the regime (e.g. run box_only)")]
    EmptyPool(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::EmptyPool(_)
            | Error::Io { .. }
            | Error::Checkpoint(_)
            | Error::PointOutsideImage { .. } => 3,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } | Error::GradcheckFailed(_) => 4,
            _ => 1,
        }
    }
}
