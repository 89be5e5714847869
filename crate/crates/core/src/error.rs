use thiserror::Error;

pub type Result<T> = std::result::Result<T, NesError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NesError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index:?} out of range for shape {shape:?}")]
    OutOfRange { index: Vec<usize>, shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl NesError {
    pub fn config(msg: impl Into<String>) -> Self {
        NesError::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        NesError::State(msg.into())
    }

    pub fn parse(offset: usize, msg: impl Into<String>) -> Self {
        NesError::Parse {
            offset,
            message: msg.into(),
        }
    }
}

impl From<std::io::Error> for NesError {
    fn from(e: std::io::Error) -> Self {
        NesError::Io(e.to_string())
    }
}
