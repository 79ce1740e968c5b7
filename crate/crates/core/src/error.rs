use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An argument violated a documented precondition.
    Domain(String),
    /// Two buffers that must agree in shape did not.
    Shape {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// The Poisson solver needs at least one interior pixel.
    GridTooSmall { height: usize, width: usize },
    /// A cubic fit needs four distinct abscissae.
    DegenerateFit { distinct: usize },
    /// A value that must stay finite did not (loss, state, ...).
    NonFinite(&'static str),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Shape {
                what,
                expected,
                found,
            } => write!(
                f,
                "shape mismatch for {what}: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::GridTooSmall { height, width } => {
                write!(f, "grid {height}x{width} is too small, need at least 3x3")
            }
            Error::DegenerateFit { distinct } => write!(
                f,
                "degenerate fit: cubic needs 4 distinct depths, got {distinct}"
            ),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
        }
    }
}

impl core::error::Error for Error {}
