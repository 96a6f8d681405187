use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("gradient tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("gradient requested for frozen tensor")]
    FrozenGradient,

    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },

    #[error("sequence of {len} positions exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {column} ({name}): {value:?} is not a number")]
    Parse {
        row: usize,
        column: usize,
        name: String,
        value: String,
    },

    #[error("malformed csv: {0}")]
    Csv(String),

    #[error("range of {have} steps is too short: need at least {need} (input + horizon)")]
    InsufficientLength { need: usize, have: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("missing horizon {0} in horizon average")]
    MissingHorizon(usize),

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
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
