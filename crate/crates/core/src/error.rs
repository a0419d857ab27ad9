use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("hyperpatch at ({y}, {x}) is out of bounds for layer `{layer}`")]
    OutOfBounds { layer: String, y: usize, x: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{}: bad magic {found:?}, expected {expected:?}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{}: unsupported format version {version}", path.display())]
    BadVersion { path: PathBuf, version: u32 },

    #[error("{}: truncated, expected {expected} bytes but found {found}", path.display())]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("{}: {found} bytes where the header implies {expected}", path.display())]
    TrailingData { path: PathBuf, expected: u64, found: u64 },

    #[error("{}: non-finite value at index {index}", path.display())]
    NonFinite { path: PathBuf, index: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{entry}: referenced file {} does not exist", path.display())]
    MissingFile { entry: String, path: PathBuf },

    #[error("pair {pair}, layer `{layer}`: expected {expected}, found {found}")]
    ShapeMismatch {
        pair: u32,
        layer: String,
        expected: String,
        found: String,
    },

    #[error("duplicate pair id {0}")]
    DuplicateId(u32),

    #[error("{}: invalid manifest: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("corrupt field dump: {0}")]
    CorruptDump(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the environment (unreadable or unwritable files)
    /// as opposed to invalid user input.
    pub fn is_environmental(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
