use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid {what}: {reason}")]
    InvalidValue { what: &'static str, reason: String },

    #[error("point ({x}, {y}) lies outside the box it is assigned to")]
    PointOutsideBox { x: f64, y: f64 },

    #[error("target score {0} is outside [0, 1]")]
    TargetOutOfRange(f64),

    #[error("rank mode needs a centerness estimate but candidate {0} has none")]
    MissingCenterness(usize),

    #[error("oracle replacement needs an association per candidate: {0}")]
    MissingAssociation(String),

    #[error("class id {class_id} is outside the class universe of size {num_classes}")]
    ClassOutOfRange { class_id: usize, num_classes: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("{section}[{index}].{field}: {reason}")]
    Schema {
        section: &'static str,
        index: usize,
        field: String,
        reason: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
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

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            what,
            reason: reason.into(),
        }
    }

    /// True for errors caused by malformed inputs rather than numerics or IO.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidBox { .. }
                | Error::InvalidValue { .. }
                | Error::PointOutsideBox { .. }
                | Error::TargetOutOfRange(_)
                | Error::MissingCenterness(_)
                | Error::MissingAssociation(_)
                | Error::ClassOutOfRange { .. }
                | Error::ShapeMismatch(_)
                | Error::Schema { .. }
                | Error::Config(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
