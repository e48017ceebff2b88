use std::path::PathBuf;

use crate::ingest::ChannelKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file is empty or has fewer than two header rows")]
    EmptyFile,
    #[error("sampling rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("malformed row at line {0}")]
    MalformedRow(usize),
    #[error("recording is missing required channel {0}")]
    MissingChannel(ChannelKind),
    #[error("channel spans do not overlap")]
    EmptyIntersection,
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("need at least two recordings to split, got {0}")]
    TooFewRecordings(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("feature column `{0}` has no observed value in the training rows")]
    ColumnAllMissingInTrain(String),
    #[error("mask selects no cells")]
    EmptyMask,
    #[error("channel has {len} samples, transform needs at least {needed}")]
    ChannelTooShort { len: usize, needed: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model input does not match configuration: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint does not match: {0}")]
    CheckpointConfigMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("training pool is empty")]
    EmptyPool,
    #[error("malformed segment store: {0}")]
    Store(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Process exit code for the CLI. One code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::EmptyFile
            | Error::NonPositiveRate(_)
            | Error::MalformedRow(_)
            | Error::MissingChannel(_)
            | Error::EmptyIntersection
            | Error::Manifest { .. } => 3,
            Error::LengthMismatch { .. }
            | Error::TooFewRecordings(_)
            | Error::EmptyInput
            | Error::ColumnAllMissingInTrain(_)
            | Error::EmptyMask
            | Error::ChannelTooShort { .. } => 4,
            Error::Config(_) | Error::ConfigMismatch(_) => 5,
            Error::CheckpointConfigMismatch(_) | Error::Checkpoint(_) => 6,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => 7,
            Error::EmptyPool | Error::Store(_) => 8,
            Error::Context { source, .. } => source.exit_code(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io("<csv>", io),
            other => Error::Store(format!("{other:?}")),
        }
    }
}
