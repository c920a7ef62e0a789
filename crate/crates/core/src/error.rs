//! Error type shared by every module in the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two operands with incompatible shapes were combined.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operation that requires a matrix received another rank.
    NotAMatrix {
        op: &'static str,
        shape: Vec<usize>,
    },
    /// Constructor data length does not match the shape product.
    DataLength { expected: usize, got: usize },
    /// A shape extent was zero.
    EmptyExtent { shape: Vec<usize> },
    /// A constructor received NaN or infinite data.
    NonFinite { op: &'static str },
    /// Channel count is not divisible by the head count.
    HeadsDontDivide { channels: usize, heads: usize },
    /// A direction projection hit a row with (near-)zero norm.
    DegenerateRow { row: usize, norm: f64 },
    /// Configuration violates a documented precondition.
    InvalidConfig { message: String },
    /// Feature-map file parsing failed; `offset` is the exact byte position.
    Format { offset: u64, message: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch, left={left:?} right={right:?}")
            }
            Error::NotAMatrix { op, shape } => {
                write!(f, "{op}: expected a 2-d tensor, got shape {shape:?}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            Error::EmptyExtent { shape } => {
                write!(f, "shape {shape:?} contains a zero extent")
            }
            Error::NonFinite { op } => {
                write!(f, "{op}: input contains NaN or infinite values")
            }
            Error::HeadsDontDivide { channels, heads } => {
                write!(f, "channels {channels} not divisible by {heads} heads")
            }
            Error::DegenerateRow { row, norm } => {
                write!(
                    f,
                    "row {row} has norm {norm:e}, below the direction-projection threshold"
                )
            }
            Error::InvalidConfig { message } => write!(f, "invalid configuration: {message}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte offset {offset}: {message}")
            }
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
