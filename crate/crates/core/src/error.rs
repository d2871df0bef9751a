//! Crate-wide error type.
//!
//! Variants are grouped by how callers react to them: dimension/config/usage
//! errors are caller mistakes, the format family covers malformed container
//! bytes, and `Numerical` flags runs that must abort (NaN loss and friends).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Structurally invalid configuration (e.g. adapter width exceeding a layer).
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse: valid objects combined the wrong way.
    #[error("usage error: {0}")]
    Usage(String),

    /// Two artifacts that must agree (adapter vs aux bundle) do not.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Non-finite values where finite ones are required; aborts the run.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("format error: unsupported container version {found}")]
    UnsupportedVersion { found: u16 },

    #[error("format error: truncated stream while reading {0}")]
    Truncated(String),

    #[error("format error: CRC32 mismatch, stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    /// Malformed content that is not a magic/version/truncation/CRC problem.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to: 3 for numerical
    /// failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
