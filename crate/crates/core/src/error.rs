use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("row {row} of the attention mask blocks every column")]
    DegenerateRow { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("cross-entropy requested with zero loss positions")]
    EmptyLoss,

    #[error("tape state: {0}")]
    TapeState(String),

    #[error("parameter {name} has no gradient")]
    MissingGradient { name: String },

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("matrix rank {rank} is below the requested {requested} components")]
    RankDeficient { rank: usize, requested: usize },

    #[error("cannot make identifiers unique for items {items:?}")]
    UnresolvedCollision { items: Vec<String> },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("unknown item {0}")]
    UnknownItem(String),

    #[error("artifact {path}: {detail}")]
    Artifact { path: PathBuf, detail: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

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
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad inputs or configuration rather than
    /// numerical trouble.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Divergence(_) | Error::NonFinite { .. } => false,
            Error::Stage { source, .. } => source.is_validation(),
            _ => true,
        }
    }

    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence(_) | Error::NonFinite { .. } => true,
            Error::Stage { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
