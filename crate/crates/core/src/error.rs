use std::path::PathBuf;

/// Errors produced anywhere in the reconstruction and training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on axis {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range 0..{bound}")]
    Index { index: usize, bound: usize },

    #[error("geometry error: {detail} (max admissible half-extent {max_half_extent_mm:.3} mm)")]
    Geometry {
        detail: String,
        max_half_extent_mm: f64,
    },

    #[error("reconstruction error: {0}")]
    Reconstruction(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("phantom spec error: {0}")]
    Spec(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }
}
