use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parameter vectors are not aligned: {0}")]
    Misaligned(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },

    #[error("unlearn selection is empty (ratio {ratio} of {samples} samples)")]
    EmptyUnlearnSelection { ratio: f64, samples: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("sparse payload index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("malformed payload: {0}")]
    MalformedPayload(String),

    #[error("client {0} is not an unlearning client")]
    NotUnlearning(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed csv: {0}")]
    MalformedCsv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

impl Error {
    /// True for errors caused by user-supplied configuration rather than
    /// failures during a run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidModelSpec(_)
                | Error::InvalidConfig(_)
                | Error::OutOfRange(_)
                | Error::Json(_)
                | Error::TomlDe(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
