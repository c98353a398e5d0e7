use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArtError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported by this diffusion spec: {0}")]
    Capability(String),

    #[error("grid validation failed at indices {indices:?}: {reason}")]
    Validation { indices: Vec<usize>, reason: String },

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("non-finite state at step {step}")]
    NumericOverflow { step: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("reference integrator failed: {0}")]
    Oracle(String),

    #[error("maximizer undefined: |Q| = {qnorm:e} does not exceed the floor {floor:e}")]
    UndefinedMaximizer { qnorm: f64, floor: f64 },

    #[error("training unhealthy: {aborted} of {total} iterations aborted")]
    TrainingHealth { aborted: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ArtError>;
