use thiserror::Error;

/// Errors surfaced by the library. Parse and data errors carry enough
/// context (line numbers, ids) to be actionable from the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("items referenced without metadata: {0:?}")]
    MissingMeta(Vec<String>),

    #[error("degenerate corpus: nothing survives 5-core filtering")]
    DegenerateCorpus,

    #[error("user {user} has only {len} interactions, need at least 3")]
    SequenceTooShort { user: String, len: usize },

    #[error("sequence length {len} exceeds maximum {max}, truncate upstream")]
    SequenceTooLong { len: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("embedding vectors missing for items: {0:?}")]
    MissingVectors(Vec<String>),

    #[error("codebook size {v} exceeds number of items {n}")]
    CodebookTooLarge { v: usize, n: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("fusion width {q} exceeds level vocabulary {v}")]
    FusionWidthTooLarge { q: usize, v: usize },

    #[error("target token sequence has length {got}, expected {expected}")]
    BadTargetLength { got: usize, expected: String },

    #[error("k must be positive for ranking metrics, got {0}")]
    BadMetricCutoff(i64),

    #[error("stale cache: built for checkpoint {cached}, current is {current}")]
    StaleCache { cached: String, current: String },

    #[error("non-finite loss in term {term}")]
    NonFiniteLoss { term: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("infeasible synthetic corpus: {0}")]
    InfeasibleSynth(String),

    #[error("artifact error: {0}")]
    Artifact(String),
}

pub type Result<T> = std::result::Result<T, Error>;
