use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input contains no sentence after normalization")]
    EmptyInput,

    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: duplicate article (page_id {page_id}, rev_id {rev_id})")]
    DuplicateArticle {
        path: PathBuf,
        line: usize,
        page_id: u64,
        rev_id: u64,
    },

    #[error("infeasible sample: {0}")]
    InfeasibleSample(String),

    #[error("no usable NLI examples in {0}")]
    NoUsableExamples(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("K must be positive")]
    InvalidK,

    #[error("empty input to {0}")]
    EmptyTopK(&'static str),

    #[error("training data must contain both labels ({0})")]
    SingleClass(&'static str),

    #[error("invalid encoder config: {0}")]
    EncoderConfig(String),

    #[error("transformer adapter requested but no delegate is registered; use `kind = \"toy\"`")]
    AdapterUnavailable,

    #[error("inconsistent ablation flags: {0}")]
    AblationConflict(&'static str),

    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),

    #[error("k = {k} out of range for {n} items")]
    KOutOfRange { k: usize, n: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint format_version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for process exit codes and FFI error codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::EncoderConfig(_)
            | Error::AdapterUnavailable
            | Error::AblationConflict(_)
            | Error::Config(_)
            | Error::InvalidK
            | Error::UnsupportedVersion { .. } => ErrorKind::Config,
            Error::EmptyInput
            | Error::Schema { .. }
            | Error::DuplicateArticle { .. }
            | Error::InfeasibleSample(_)
            | Error::NoUsableExamples(_)
            | Error::SingleClass(_)
            | Error::CorruptCheckpoint(_)
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
            Error::DimensionMismatch { .. }
            | Error::NonFinite(_)
            | Error::EmptyTopK(_)
            | Error::LengthMismatch(..)
            | Error::KOutOfRange { .. } => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}
