use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarmonizeError>;

#[derive(Debug, Error)]
pub enum HarmonizeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("argument error: {0}")]
    Argument(String),

    /// A region used for statistics has no member pixels at this scale.
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    /// A sampling map has no active pixels to draw patch locations from.
    #[error("empty region: {0}")]
    EmptyRegion(String),

    /// Region query is undefined because the mean embedding vanished.
    #[error("degenerate query: mean embedding norm {0:e}")]
    DegenerateQuery(f64),

    #[error("non-finite value in {component}: {value}")]
    Numeric { component: String, value: f64 },

    #[error("manifest error for {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl HarmonizeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(component: impl Into<String>, value: f64) -> Self {
        Self::Numeric {
            component: component.into(),
            value,
        }
    }

    /// True for the recoverable "nothing to sample / nothing to compare" signals.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Self::DegenerateRegion(_) | Self::EmptyRegion(_) | Self::DegenerateQuery(_)
        )
    }
}
