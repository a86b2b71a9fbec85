use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("conjugate gradient diverged after {iters} iterations (residual {residual:e}); check the forward/adjoint pair")]
    CgDiverged { iters: usize, residual: f64 },
    #[error("numerical blow-up in {0}; try more integration steps or a wider kernel")]
    Blowup(&'static str),
    #[error("malformed tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("training diverged: non-finite loss at stage {stage}, sample {sample}")]
    NonFiniteLoss { stage: usize, sample: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
