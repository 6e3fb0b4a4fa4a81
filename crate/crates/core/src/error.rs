use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("degenerate pair: inputs coincide (|x - y| = {distance:.3e} < {min_discrepancy:.3e})")]
    DegeneratePair { distance: f64, min_discrepancy: f64 },

    #[error("assumption violated in {op}: {detail}")]
    AssumptionViolation { op: &'static str, detail: String },

    #[error("non-finite value encountered in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("dataset too small: {detail}")]
    DatasetTooSmall { detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("degenerate statistic: {detail}")]
    DegenerateStatistic { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
