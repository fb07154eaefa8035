use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two extents that must agree do not.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    /// Wrong rank or otherwise malformed shape.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("tape error: {0}")]
    Tape(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            op,
            axis,
            expected,
            got,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
