use thiserror::Error;

/// Errors produced by the steering laboratory.
#[derive(Debug, Error)]
pub enum SteerError {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error("tape node {0} does not belong to this tape")]
    UnknownNode(usize),

    #[error("backward root must be a 1x1 scalar, got {rows}x{cols}")]
    RootNotScalar { rows: usize, cols: usize },

    #[error("visual prompt rasterizes to an empty region")]
    EmptyRegion,

    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("image grid is {got_h}x{got_w}, decoder expects {want_h}x{want_w}")]
    GridMismatch {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },

    #[error("attention vector sums to zero; energy is undefined")]
    ZeroAttention,

    #[error("pretraining diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {context}: {message}")]
    Parse { context: String, message: String },
}

pub type Result<T> = std::result::Result<T, SteerError>;

impl SteerError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        SteerError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        SteerError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        SteerError::InvalidArgument {
            op,
            message: message.into(),
        }
    }
}
