//! Error type shared by every module in the crate.

use std::fmt;
use std::path::PathBuf;

/// Errors produced by vector math, model evaluation, checkpoint I/O and the
/// experiment harness.
#[derive(Debug)]
pub enum TwaError {
    /// Vector or matrix shapes do not line up.
    Dimension(String),
    /// A group or element index is out of range.
    IndexOutOfRange { index: usize, len: usize },
    /// An argument violates a documented precondition.
    Input(String),
    /// A computation produced or received non-finite values.
    Numeric(String),
    /// A CSV row could not be parsed.
    Parse { line: usize, message: String },
    /// An underlying filesystem operation failed.
    Io { path: PathBuf, source: std::io::Error },
    /// A checkpoint file exists but its contents are not valid.
    Corrupt { path: PathBuf, reason: String },
    /// A checkpoint file stores a different parameter count than expected.
    DimensionOnDisk {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    /// A file referenced by a manifest does not exist.
    MissingFile { path: PathBuf },
    /// A measured performance ratio missed its required target.
    Benchmark { ratio: f64, target: f64 },
}

impl fmt::Display for TwaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            Self::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            Self::Input(msg) => write!(f, "invalid input: {msg}"),
            Self::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Self::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Self::Io { path, source } => write!(f, "I/O error on {}: {source}", path.display()),
            Self::Corrupt { path, reason } => {
                write!(f, "corrupt checkpoint file {}: {reason}", path.display())
            }
            Self::DimensionOnDisk {
                path,
                expected,
                found,
            } => write!(
                f,
                "checkpoint {} stores D={found}, expected D={expected}",
                path.display()
            ),
            Self::MissingFile { path } => write!(f, "missing file: {}", path.display()),
            Self::Benchmark { ratio, target } => write!(
                f,
                "measured speedup {ratio:.2}x is below the {target:.0}x target"
            ),
        }
    }
}

impl std::error::Error for TwaError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, TwaError>;
