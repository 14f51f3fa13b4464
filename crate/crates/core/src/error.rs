use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("{what} out of range: {value} (expected {expected})")]
    OutOfRange {
        what: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("non-finite value during {stage}: {detail}")]
    NonFinite { stage: String, detail: String },

    #[error("prerequisite stage `{0}` has not completed")]
    Prerequisite(String),

    #[error("config digest mismatch for stage `{stage}`: stored {stored}, current {current}")]
    DigestMismatch {
        stage: String,
        stored: String,
        current: String,
    },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("annotator failed on utterance {id}: {reason}")]
    Annotator { id: String, reason: String },

    #[error("split hygiene violated: {0}")]
    SplitHygiene(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Checkpoint(#[from] depflow_nn::CheckpointError),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for precondition failures, 3 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
