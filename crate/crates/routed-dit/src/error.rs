use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Shapes of two operands do not conform. Carries both shapes.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A dimension precondition failed (empty last dim, bad config geometry, ...).
    Dim(String),
    /// A row index is outside the valid range.
    Index { index: usize, rows: usize },
    /// An argument is outside its documented domain.
    Arg(String),
    /// A non-finite value appeared in the forward pass. Names the producing op.
    NonFinite { op: &'static str, node: usize },
    /// Configuration file / flag problem.
    Config(String),
    /// Checkpoint or emitted-file format problem.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Dim(msg) => write!(f, "dimension error: {msg}"),
            Error::Index { index, rows } => {
                write!(f, "row index {index} out of range for {rows} rows")
            }
            Error::Arg(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite { op, node } => {
                write!(f, "non-finite value produced by op `{op}` (tape node {node})")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
