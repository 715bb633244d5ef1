//! Structured error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Errors reported by the library.
///
/// Every failure mode carries enough structure for a caller to branch on it;
/// none of the library entry points panic on user input.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Band limit must be even and no larger than the supported maximum.
    InvalidLmax { lmax: usize, max: usize },
    /// A coefficient vector's length disagrees with its stated band limit.
    LengthMismatch { expected: usize, got: usize },
    /// A direction cannot be built from a (near-)zero or non-finite vector.
    ZeroVector,
    /// Hemisphere meshes exist only for 24 * 4^k pixels, k = 0..=4.
    UnsupportedMeshSize { got: usize },
    /// Volume fractions must be positive and sum to one.
    InvalidFractions(String),
    /// An operation received an empty input it cannot work with.
    Empty(&'static str),
    /// The requested quantity is undefined for this input.
    Undefined(&'static str),
    /// Invalid parameter value or combination.
    InvalidArgument(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidLmax { lmax, max } => {
                write!(f, "band limit {lmax} unsupported: must be even and <= {max}")
            }
            Error::LengthMismatch { expected, got } => {
                write!(f, "coefficient length {got} does not match band limit (expected {expected})")
            }
            Error::ZeroVector => write!(f, "cannot normalize a zero or non-finite vector"),
            Error::UnsupportedMeshSize { got } => {
                write!(
                    f,
                    "unsupported mesh size {got}: supported hemisphere sizes are 24, 96, 384, 1536, 6144"
                )
            }
            Error::InvalidFractions(msg) => write!(f, "invalid volume fractions: {msg}"),
            Error::Empty(what) => write!(f, "empty input: {what}"),
            Error::Undefined(what) => write!(f, "undefined quantity: {what}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
