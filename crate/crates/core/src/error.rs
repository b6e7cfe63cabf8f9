use std::path::PathBuf;

use learnlock_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("no classes found in {0}")]
    NoClasses(PathBuf),
    #[error("inconsistent image size at {path}: expected {expected:?}, found {found:?}")]
    ImageSize {
        path: PathBuf,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("unknown class {class:?} at {path}")]
    UnknownClass { class: String, path: PathBuf },
    #[error("cannot decode image {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("fingerprint mismatch: key was crafted for {key}, dataset is {dataset}")]
    FingerprintMismatch { key: String, dataset: String },
    #[error("class {0} is outside the key scope")]
    OutOfScope(usize),
    #[error("corrupt key: {0}")]
    CorruptKey(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated stream: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
