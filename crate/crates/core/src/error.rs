use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Failure modes shared by every operation in the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up.
    Dimension {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// A scalar parameter is outside its admissible range.
    Parameter { name: &'static str, reason: String },
    /// A class or row index points past the end of its container.
    Index { what: &'static str, index: usize, bound: usize },
    /// A call contract was violated (unknown op, missing forward state, ...).
    Contract(String),
    /// A configuration is internally inconsistent.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, expected, found } => write!(
                f,
                "{op}: dimension mismatch, expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::Parameter { name, reason } => write!(f, "invalid parameter `{name}`: {reason}"),
            Error::Index { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::Parameter { name, reason: reason.into() }
}
