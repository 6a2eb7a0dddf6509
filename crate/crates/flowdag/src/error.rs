use thiserror::Error;

/// Crate-wide error type. Configuration problems map to exit code 2 at the
/// CLI boundary, everything else to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("reduction failed: {0}")]
    Reduction(String),

    #[error("training aborted in stage {stage}: {reason}")]
    Training { stage: String, reason: String },

    #[error("stage ordering violated: {0}")]
    StageOrder(String),

    #[error("evaluation failed: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
