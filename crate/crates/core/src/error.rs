use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no term survives the document-frequency and stopword filters")]
    EmptyVocabulary,

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("document cannot be split: {0}")]
    DegenerateDocument(String),

    #[error("vector has zero total mass")]
    ZeroMass,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("environment index {env} out of range (E = {num_envs})")]
    EnvOutOfRange { env: usize, num_envs: usize },

    #[error("prior variant mismatch: {0}")]
    VariantMismatch(String),

    #[error("non-finite ELBO at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("model has no environment deviations (VTM variant)")]
    NoGammaVariant,

    #[error("metric requires exactly two environments, found {0}")]
    RequiresTwoEnvironments(usize),

    #[error("no topic shares a top word with the keyword list [{0}]")]
    NoOverlap(String),

    #[error("not enough documents in stratum '{stratum}': need {needed}, have {available}")]
    InsufficientDocs {
        stratum: String,
        needed: usize,
        available: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("artifact truncated at byte offset {offset} (expected {expected} payload bytes)")]
    Truncated { offset: u64, expected: u64 },

    #[error("artifact checksum mismatch over payload bytes 0..{len}")]
    ChecksumMismatch { len: u64 },

    #[error("unsupported artifact format: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
