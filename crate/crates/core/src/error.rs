use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CcrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CcrError {
    #[error("input contains NaN or infinite values ({0})")]
    NonFinite(&'static str),

    #[error("columns are not orthonormal: max |U^T U - I| = {deviation:.3e}")]
    NotOrthonormal { deviation: f64 },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("invalid configuration: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("SVD failed to converge on a {rows}x{cols} matrix")]
    NoConvergence { rows: usize, cols: usize },

    #[error("disturbance vanishes after removing the instrument component; cannot rescale")]
    DegenerateDisturbance,

    #[error("singular weight: instrument singular value {value:.3e} is below {threshold:.3e}")]
    SingularWeight { value: f64, threshold: f64 },

    #[error("ground truth is required for this computation")]
    TruthRequired,

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("schema error in column `{column}`: {message}")]
    Schema { column: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CcrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CcrError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        CcrError::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn schema(column: impl Into<String>, message: impl Into<String>) -> Self {
        CcrError::Schema {
            column: column.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the numbers rather than the inputs' shape or the environment.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CcrError::NonFinite(_)
                | CcrError::DegenerateSpectrum(_)
                | CcrError::NoConvergence { .. }
                | CcrError::DegenerateDisturbance
                | CcrError::SingularWeight { .. }
                | CcrError::NotOrthonormal { .. }
        )
    }
}
