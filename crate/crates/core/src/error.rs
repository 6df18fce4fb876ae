use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    Geometry(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("template not embeddable: {0}")]
    Template(String),
    #[error("dimension {dim} exceeds cap {cap}")]
    TooLarge { dim: usize, cap: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("undefined quantity: {0}")]
    Undefined(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
