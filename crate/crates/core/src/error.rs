use thiserror::Error;

use crate::data::DataError;
use crate::forest::ForestError;
use crate::geodata::GeoError;
use crate::metrics::MetricsError;
use crate::shap::ShapError;
use crate::validation::ValidationError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Shap(#[from] ShapError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Usage(String),
    /// A result failed an internal consistency check.
    #[error("{0}")]
    Check(String),
}

impl Error {
    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Data(_) => "data",
            Error::Forest(_) => "forest",
            Error::Shap(_) => "shap",
            Error::Metrics(_) => "metrics",
            Error::Validation(_) => "validation",
            Error::Geo(_) => "geodata",
            Error::Io { .. } => "io",
            Error::Usage(_) => "usage",
            Error::Check(_) => "check",
        }
    }

    /// 2 for unusable input or invocation, 1 for failures during computation.
    pub fn exit_code(&self) -> i32 {
        let input = match self {
            Error::Data(_) | Error::Io { .. } | Error::Usage(_) => true,
            Error::Forest(e) => matches!(
                e,
                ForestError::Format(_)
                    | ForestError::InvalidParams(_)
                    | ForestError::InvalidTree(_)
                    | ForestError::DimensionMismatch { .. }
                    | ForestError::NonFinite { .. }
                    | ForestError::InvalidThreshold(_)
            ),
            Error::Shap(e) => matches!(e, ShapError::Parse(_) | ShapError::Input(_)),
            Error::Metrics(e) => matches!(
                e,
                MetricsError::Parse { .. }
                    | MetricsError::InvalidBins(_)
                    | MetricsError::InvalidFraction(_)
                    | MetricsError::InvalidBootstrap(_)
            ),
            Error::Validation(e) => !matches!(
                e,
                ValidationError::Training { .. } | ValidationError::Scoring { .. } | ValidationError::Metrics { .. }
            ),
            Error::Geo(e) => !matches!(e, GeoError::Forest(_)),
            Error::Check(_) => false,
        };
        if input {
            2
        } else {
            1
        }
    }
}
