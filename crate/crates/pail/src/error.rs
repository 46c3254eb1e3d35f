use std::path::PathBuf;

/// Errors surfaced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("trajectory exceeds horizon: length {len} > T {horizon}")]
    TrajectoryExceedsHorizon { len: usize, horizon: usize },

    #[error("trajectory {id:?} has no sdg label")]
    MissingSdg { id: String },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty attention context")]
    EmptyAttentionContext,

    #[error("empty batch")]
    EmptyBatch,

    #[error("simulator frozen")]
    SimulatorFrozen,

    #[error("simulator not frozen")]
    SimulatorNotFrozen,

    #[error("pretrain criterion unreachable: best validation MSE {best_mse}")]
    CriterionUnreachable { best_mse: f64 },

    #[error("need at least {need} items, got {got} ({context})")]
    NotEnough {
        need: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
