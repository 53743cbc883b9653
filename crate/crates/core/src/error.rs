use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected} channel(s) for {what}, found {found}")]
    Channels {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("value {value} at index {index} is outside [0, 1] in {what}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        value: f32,
    },

    #[error("{what}: image of {height}x{width} is smaller than the required {min}x{min}")]
    TooSmall {
        what: &'static str,
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("{what}: spatial size {height}x{width} is not divisible by {factor}")]
    Indivisible {
        what: &'static str,
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parameter group `{group}`: `{name}` has shape {found:?}, model expects {expected:?}")]
    ParamShape {
        group: String,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parameter group `{group}`: `{name}` missing from checkpoint")]
    MissingParam { group: String, name: String },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing counterpart for `{stem}`: present in {present}, absent from {absent}")]
    MissingCounterpart {
        stem: String,
        present: PathBuf,
        absent: PathBuf,
    },

    #[error("unmatched stems: {0:?}")]
    UnmatchedStems(Vec<String>),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the inputs on disk rather than by the
    /// caller's configuration or by numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_)
                | Error::MissingCounterpart { .. }
                | Error::UnmatchedStems(_)
                | Error::Image { .. }
                | Error::Io { .. }
                | Error::CheckpointVersion { .. }
                | Error::CorruptCheckpoint(_)
                | Error::Channels { .. }
                | Error::OutOfRange { .. }
                | Error::TooSmall { .. }
                | Error::Indivisible { .. }
                | Error::ParamShape { .. }
                | Error::MissingParam { .. }
        )
    }
}
