use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload length mismatch: header declares {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("code {code} at position {position} out of range for {bits}-bit quantization")]
    CodeOutOfRange { code: u32, position: usize, bits: u8 },

    #[error("empty report")]
    EmptyReport,

    #[error("invalid bit width {0}: must be in 1..=8")]
    InvalidBits(u32),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate channel: zero quantization scale")]
    DegenerateScale,

    #[error("zero denominator: weight vector has zero quadratic form")]
    ZeroDenominator,

    #[error("enumeration guard exceeded: {what} = {value} > {limit}")]
    Guard {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("trace does not match problem: {0}")]
    TraceMismatch(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
