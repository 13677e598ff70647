use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration invariant does not hold; the payload names it.
    InvalidConfig(&'static str),
    InvalidBox(String),
    InvalidSample(String),
    PatchTooSmall { side: usize, n: usize },
    NonFiniteGradient,
    NonFiniteLoss(String),
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    EmptyDataset,
    Unsupported(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(what) => write!(f, "invalid config: {what}"),
            Error::InvalidBox(msg) => write!(f, "invalid box: {msg}"),
            Error::InvalidSample(msg) => write!(f, "invalid sample: {msg}"),
            Error::PatchTooSmall { side, n } => {
                write!(f, "patch too small for grid: side {side} px < {n} cells")
            }
            Error::NonFiniteGradient => f.write_str("non-finite gradient"),
            Error::NonFiniteLoss(ctx) => write!(f, "non-finite loss ({ctx})"),
            Error::ShapeMismatch { expected, found } => write!(
                f,
                "shape mismatch: expected {}x{}x{}, found {}x{}x{}",
                expected.0, expected.1, expected.2, found.0, found.1, found.2
            ),
            Error::EmptyDataset => f.write_str("dataset is empty"),
            Error::Unsupported(msg) => write!(f, "unsupported: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
