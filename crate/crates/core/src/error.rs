use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("degenerate rotation: quaternion norm {norm} is not usable")]
    DegenerateRotation { norm: f64 },
    #[error("non-finite parameter in {what}")]
    NonFiniteParameter { what: &'static str },
    #[error("temporal variance {value} is too small")]
    DegenerateTemporalVariance { value: f64 },
    #[error("scene contains no gaussians")]
    EmptyScene,
    #[error("exposure must be positive, got {0}")]
    InvalidExposure(f64),
    #[error("radiance bank entry {index} has not been initialized")]
    ColdBank { index: usize },
    #[error("non-finite gradient in group {group}")]
    NonFiniteGradient { group: String },
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("image format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::ContractViolation(msg.into())
    }
}
