use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {0} where a finite value is required")]
    NonFinite(f64),

    #[error("NaN input rejected by conversion policy")]
    NanRejected,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing weight blob `{0}`")]
    MissingBlob(String),

    #[error("missing embedding table `{0}`")]
    MissingTable(String),

    #[error("missing tensor `{0}` during execution")]
    MissingTensor(String),

    #[error("id {id} out of range for table `{table}` with {rows} rows")]
    IndexOutOfRange { table: String, id: u32, rows: usize },

    #[error("int32 accumulator overflow in `{0}` (reduction too long for bit width)")]
    AccumulatorOverflow(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("unsupported node kind {kind} under backend `{backend}`")]
    Unsupported { kind: String, backend: String },

    #[error("no calibration histogram for activation `{0}`")]
    MissingCalibration(String),

    #[error("empty histogram")]
    EmptyHistogram,

    #[error("dataset has a single label class; NE is undefined")]
    SingleClass,

    #[error("graphs are not aligned: {0}")]
    Alignment(String),

    #[error("debug bundle is not equivalent to the source model: {0}")]
    BundleMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Version { .. } => ErrorClass::Config,
            Error::NonFinite(_)
            | Error::NanRejected
            | Error::IndexOutOfRange { .. }
            | Error::SingleClass
            | Error::Data(_)
            | Error::Checksum(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::MissingCalibration(_)
            | Error::EmptyHistogram => ErrorClass::Data,
            _ => ErrorClass::Internal,
        }
    }
}
