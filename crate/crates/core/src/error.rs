use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),

    #[error("unsupported WAV encoding: format tag {format_tag}, {bits} bits per sample")]
    UnsupportedEncoding { format_tag: u16, bits: u16 },

    #[error("truncated data chunk: header declares {declared} bytes, file holds {available}")]
    TruncatedData { declared: usize, available: usize },

    #[error("malformed raster {}: {reason}", path.display())]
    MalformedRaster { path: PathBuf, reason: String },

    #[error("{}: expected {expected_width}x{expected_height}, got {width}x{height}", path.display())]
    WrongDimensions {
        path: PathBuf,
        width: usize,
        height: usize,
        expected_width: usize,
        expected_height: usize,
    },

    #[error("{}: need at least {needed} frames, found {found}", dir.display())]
    TooFewFrames { dir: PathBuf, needed: usize, found: usize },

    #[error("reference signal is silent")]
    SilentReference,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("clip too short: need {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("audio is not measurable (every block is below the absolute gate)")]
    Unmeasurable,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("stem backend failed: {0}")]
    Backend(String),

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
