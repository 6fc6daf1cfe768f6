use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("transform is not invertible (determinant {0:e})")]
    InvalidTransform(f64),
    #[error("transform is not a similarity: {0}")]
    NotSimilarity(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("sequence too short: {what} needs at least {min}, got {got}")]
    TooShort { what: &'static str, min: usize, got: usize },
    #[error("direction has near-zero norm ({0:e})")]
    DegenerateDirection(f64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
