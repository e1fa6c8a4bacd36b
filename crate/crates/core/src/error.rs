use thiserror::Error;

/// Errors raised by the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("non-finite loss at level {level}, iteration {iteration}")]
    Divergence { level: usize, iteration: usize },

    #[error("format error in {context} at {location}: {msg}")]
    Format {
        context: String,
        location: String,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(
        op: &'static str,
        axis: impl Into<String>,
        expected: usize,
        found: usize,
    ) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            expected,
            found,
        }
    }
}
