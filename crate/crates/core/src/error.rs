use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("action component {index} = {value} outside [-1, 1]")]
    ActionOutOfBounds { index: usize, value: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("replay buffer: {0}")]
    Replay(String),

    #[error("environment: {0}")]
    Env(String),

    #[error("planner: {0}")]
    Planner(String),

    #[error("corrupt or incompatible file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
