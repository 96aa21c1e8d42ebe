use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KwsError> = std::result::Result<T, E>;

/// Parse failures for `KWL1` lattice files.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected \"KWL1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported lattice format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("truncated lattice: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing bytes in lattice: expected {expected} bytes, got {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("invalid log-probability {value} at {field}[{index}]")]
    InvalidLogProb {
        field: &'static str,
        index: usize,
        value: f32,
    },
    #[error("greedy duration {value} at frame {frame} exceeds D_max {d_max}")]
    DurationOutOfRange {
        frame: usize,
        value: u16,
        d_max: u16,
    },
}

#[derive(Debug, Error)]
pub enum KwsError {
    #[error("{what} = {value} out of range [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: usize,
        lo: usize,
        hi: usize,
    },
    #[error("dimension mismatch: oracle has U = {expected}, keyword has U = {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("mode error: {0}")]
    Mode(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("protocol error: expected frame {expected}, got frame {got}")]
    Protocol { expected: usize, got: usize },
    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl KwsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KwsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        KwsError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        KwsError::Validation(msg.into())
    }

    /// True for errors caused by the filesystem or malformed input files.
    pub fn is_io_or_parse(&self) -> bool {
        matches!(
            self,
            KwsError::Io { .. } | KwsError::Json { .. } | KwsError::Format { .. }
        )
    }
}
