use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("memory store has no instances")]
    EmptyMemory,

    #[error("temporal order violated: {0}")]
    TemporalOrder(String),

    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at optimizer step {step}: loss is not finite")]
    TrainingDivergence { step: usize },

    #[error("cluster quality undefined: {0}")]
    QualityUndefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case tag used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::EmptyMemory => "empty_memory",
            Error::TemporalOrder(_) => "temporal_order",
            Error::Ingestion { .. } => "ingestion",
            Error::Usage(_) => "usage",
            Error::TrainingDivergence { .. } => "training_divergence",
            Error::QualityUndefined(_) => "quality_undefined",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
