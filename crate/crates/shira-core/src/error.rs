//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ShiraError>;

#[derive(Debug, Error)]
pub enum ShiraError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("empty matrix passed to {0}")]
    EmptyMatrix(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask does not match model: {0}")]
    MaskMismatch(String),

    #[error("gradient cache does not match model: {0}")]
    StaleCache(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("off-mask weight drift at layer {layer}, entry ({row},{col}): |delta| = {magnitude:e}; gradient masking is broken")]
    OffMaskDrift {
        layer: usize,
        row: usize,
        col: usize,
        magnitude: f64,
    },

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("an adapter is already active; unload it first")]
    AdapterActive,

    #[error("no adapter is active")]
    NoActiveAdapter,

    #[error("adapter kind mismatch: {0}")]
    KindMismatch(String),

    #[error("missing single-adapter baseline for task '{0}'")]
    MissingBaseline(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Structural errors raised by the binary file readers. Each corruption
/// class gets its own variant so callers can tell a truncated download
/// from a file written by a different tool.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unknown adapter kind byte {0}")]
    BadKind(u8),

    #[error("unknown mask strategy byte {0}")]
    BadStrategy(u8),

    #[error("unknown activation byte {0}")]
    BadActivation(u8),

    #[error("coords not strictly increasing (layer {layer}, position {position})")]
    CorruptSortedness { layer: u32, position: u64 },

    #[error("coordinate out of bounds (layer {layer}): ({row},{col}) against shape {rows}x{cols}")]
    OutOfBounds {
        layer: u32,
        row: u32,
        col: u32,
        rows: u32,
        cols: u32,
    },

    #[error("declared count disagrees with payload: {0}")]
    CountMismatch(String),

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("trailing bytes after end of payload")]
    TrailingBytes,

    #[error("metadata block is not valid UTF-8")]
    BadMeta,

    #[error("non-finite value in {0} payload")]
    NonFinite(&'static str),

    #[error("architecture descriptor invalid: {0}")]
    BadArchitecture(String),
}

impl ShiraError {
    pub fn shape(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        ShiraError::ShapeMismatch {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }

    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        ShiraError::Io {
            path: path.into(),
            source,
        }
    }
}
