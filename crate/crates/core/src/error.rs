use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that cannot be combined by the requested op.
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("crop box {index} ({x}, {y}, {w}x{h}) falls outside the {width}x{height} layer")]
    CropOutOfBounds {
        index: usize,
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },

    #[error("no defect pixels found")]
    EmptyMask,

    #[error("missing {resource} for class {class}")]
    MissingResource { resource: &'static str, class: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures reading or writing `.fgs` model files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a model file: bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("unsupported model file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("model file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed model description: {0}")]
    Spec(String),

    #[error("parameter {name}: expected {expected} values, found {found}")]
    LengthMismatch {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("parameter {0} missing from model file")]
    MissingParameter(String),

    #[error("unexpected parameter {0} in model file")]
    UnexpectedParameter(String),

    #[error("{trailing} trailing bytes after checksum")]
    TrailingBytes { trailing: usize },

    #[error("checksum mismatch: file says {stored:08x}, contents hash to {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
