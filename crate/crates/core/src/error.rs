use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpssmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("matrix not positive definite after jitter {jitter:e}{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    SingularMatrix {
        jitter: f64,
        context: Option<String>,
    },

    #[error("all particle weights vanished at time index {time}")]
    DegenerateWeights { time: usize },

    #[error("non-finite gradient for parameter `{parameter}`")]
    NonFiniteGradient { parameter: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),
}

impl GpssmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Configuration(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, GpssmError>;
