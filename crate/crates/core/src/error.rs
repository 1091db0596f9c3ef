use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("corpus contains no usable sentences")]
    EmptyCorpus,

    #[error("no sentence with id {0}")]
    NotFound(u64),

    #[error("no entailment score for sentence {0}")]
    MissingScore(u64),

    #[error("no embedding for sentence {0}")]
    MissingEmbedding(u64),

    #[error("backend failed after {retries} retries: {message}")]
    Backend { message: String, retries: u32 },

    #[error("batch element {index}: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("expected a pool in stage {expected}, got {found}")]
    StageOrder {
        expected: &'static str,
        found: &'static str,
    },

    #[error("filter kept no sentences (max observed p_entailment = {max_entailment})")]
    EmptyFilterResult { max_entailment: f64 },

    #[error("inconsistent pools: {0}")]
    Inconsistent(String),

    #[error("degenerate (all-zero) vector{}", cluster.map(|c| format!(" at cluster {c}")).unwrap_or_default())]
    DegenerateVector { cluster: Option<usize> },

    #[error("k = {k} exceeds the number of points ({n})")]
    KTooLarge { k: usize, n: usize },

    #[error("k must be at least 1")]
    InvalidK,

    #[error("{combinations} candidate subsets exceed the exhaustive-search limit of {limit}")]
    TooLarge { combinations: u128, limit: u128 },

    #[error("pool holds {available} queries but {requested} were requested")]
    ShortPool { requested: usize, available: usize },

    #[error("query budget resolves to zero")]
    ZeroBudget,

    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("budget exhausted: {spent} of {budget} spent, {requested} more requested")]
    BudgetExhausted {
        spent: usize,
        budget: usize,
        requested: usize,
    },

    #[error("victim unavailable after {answered} answered queries: {message}")]
    VictimUnavailable { message: String, answered: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("cannot parse response: {message} (recovered {} labels)", recovered.len())]
    Parse { message: String, recovered: Vec<usize> },

    #[error("degenerate training data: {0}")]
    DegenerateTraining(String),

    #[error("loss became non-finite at step {step}")]
    NumericalDivergence { step: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Backend,
    Budget,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl ToString) -> Self {
        Error::Format {
            what,
            message: message.to_string(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Backend { .. }
            | Error::MissingScore(_)
            | Error::MissingEmbedding(_)
            | Error::VictimUnavailable { .. }
            | Error::Parse { .. } => ErrorKind::Backend,
            Error::BudgetExhausted { .. } => ErrorKind::Budget,
            Error::BatchItem { source, .. } | Error::Round { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }
}
