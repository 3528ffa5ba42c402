use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum DaliError {
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("context dimension mismatch: expected {expected}, got {got}")]
    ContextDim { expected: usize, got: usize },
    #[error("context value {value} for `{name}` lies outside its train and eval ranges")]
    ContextOutOfRange { name: String, value: f64 },
    #[error("episode already finished")]
    EpisodeDone,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("variant wiring: {0}")]
    Wiring(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DaliError>;

impl DaliError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        DaliError::Config { key: key.into(), msg: msg.into() }
    }
}
