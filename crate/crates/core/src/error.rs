use thiserror::Error;

/// Error type shared across the pipeline modules.
#[derive(Debug, Error)]
pub enum LumError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: left {left:?} vs right {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid mask: row {row} has no unmasked column")]
    InvalidMask { row: usize },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("coverage error: missing behaviors {0:?}")]
    Coverage(Vec<String>),

    #[error("catalog error: unknown behavior {0}")]
    Catalog(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LumError>;
