use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported sample rate {got} Hz (expected {expected} Hz, resample first)")]
    UnsupportedRate { got: u32, expected: u32 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unsupported audio: {reason}")]
    Audio { path: PathBuf, reason: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checksum mismatch in blob {blob} of layer `{layer}`")]
    Crc { layer: String, blob: usize },

    #[error("layer table entry {index} failed its checksum")]
    TableCrc { index: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("manifest {path} line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at step {step}{}", checkpoint.as_ref().map(|p| format!(" (checkpoint written to {})", p.display())).unwrap_or_default())]
    NonFinite {
        step: usize,
        checkpoint: Option<PathBuf>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
