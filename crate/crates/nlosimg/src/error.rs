use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("region of interest has zero area")]
    DegenerateRoi,

    #[error("{0}")]
    Geometry(String),

    #[error("singular normal matrix: {0}")]
    Singular(String),

    #[error("target not detectable pre-stack: {0}")]
    NotDetectable(String),

    #[error("unwrap failure: {0}")]
    Unwrap(String),

    #[error("peak lies on the grid boundary along {0}")]
    PeakOnBoundary(&'static str),

    #[error("too few beams: need at least {needed}, got {got}")]
    TooFewBeams { needed: usize, got: usize },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field: field.to_string(),
        reason: reason.into(),
    }
}
