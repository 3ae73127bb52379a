use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed smali: {0}")]
    MalformedSmali(String),

    #[error("vocab size {requested} too small, need at least {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("token id {id} out of range for vocab of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value detected in {0}")]
    NonFiniteDetected(String),

    #[error("position {position} out of range (len {len})")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("class {0} has no instructions")]
    EmptyClass(String),

    #[error("empty vector list")]
    EmptyList,

    #[error("vector width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("too few items: need {needed}, got {got}")]
    TooFewItems { needed: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("stale artifact {path}: recorded digest {expected}, found {found}")]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("missing input {0}")]
    MissingInput(PathBuf),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 validation, 3 stale/missing artifact,
    /// 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::StaleArtifact { .. } | Error::MissingInput(_) => 3,
            Error::NonFiniteDetected(_) => 4,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
