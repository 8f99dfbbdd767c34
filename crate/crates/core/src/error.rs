use biocast_autograd::AutogradError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("no normalization statistics for {0}")]
    MissingStat(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown layout `{0}`")]
    UnknownLayout(String),
    #[error("malformed row {row}: {detail}")]
    MalformedRow { row: usize, detail: String },
    #[error("source `{path}`: {detail}")]
    Source { path: String, detail: String },
    #[error("container: {0}")]
    Container(#[from] crate::batch_builder::container::ContainerError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
