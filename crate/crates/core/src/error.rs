use pirt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PirtError {
    #[error(transparent)]
    Tensor(TensorError),

    #[error("config error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Decoding failures keep one variant whichever layer detects them.
impl From<TensorError> for PirtError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Format { offset, msg } => PirtError::Format { offset, msg },
            other => PirtError::Tensor(other),
        }
    }
}

impl PirtError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        PirtError::Io {
            context: context.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, PirtError::Numeric(_) | PirtError::Tensor(TensorError::Numeric(_)))
    }
}

pub type Result<T> = std::result::Result<T, PirtError>;
