use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("class {class} ({name}) has only {available} eligible image(s), {requested} requested")]
    InsufficientImages {
        class: usize,
        name: String,
        available: usize,
        requested: usize,
    },

    #[error("balancer error: {0}")]
    Balance(String),

    #[error("no empty region for target cell in image {image_id} after {tries} tries")]
    NoEmptyRegion { image_id: String, tries: usize },

    #[error("feature dump error: {0}")]
    FeatureDump(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("zero-norm vector at instance {index}")]
    ZeroNorm { index: usize },

    #[error("zero-norm mean for class {class}")]
    ZeroNormMean { class: usize },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
