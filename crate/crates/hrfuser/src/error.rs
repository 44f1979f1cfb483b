use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Two operands whose shapes must agree do not.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand has a shape the operation cannot accept.
    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// Bad configuration value (group counts, channel/head pairs, CLI flags, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Misuse of the gradient tape (non-scalar loss, repeated backward, detached graph).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Numeric divergence (NaN/Inf loss); maps to exit code 3 in the CLI.
    #[error("numeric divergence: {0}")]
    Diverged(String),

    /// Malformed checkpoint or scene file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, shape: &[usize], msg: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            msg: msg.into(),
        }
    }
}
