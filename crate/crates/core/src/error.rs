use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every axis needs at least 2 voxels")]
    InvalidShape([usize; 3]),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("data length {got} does not match expected {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("expected a {expected} field, got {got}")]
    WrongFieldKind { expected: &'static str, got: &'static str },

    #[error("channel count mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward called without a recorded forward pass")]
    MissingForward,

    #[error("model configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty curve log")]
    EmptyLog,

    #[error("landmark count mismatch: {0} vs {1}")]
    LandmarkCountMismatch(usize, usize),

    #[error("{path}: bad magic {found:?}")]
    WrongMagic { path: PathBuf, found: Vec<u8> },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("NIfTI with detached data (magic \"ni1\") is not supported")]
    DetachedNifti,

    #[error("invalid NIfTI header size {0}")]
    BadHeaderSize(i32),

    #[error("{path}: truncated payload, expected {expected} bytes, got {got}")]
    Truncated { path: PathBuf, expected: usize, got: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
