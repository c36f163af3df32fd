use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("label is not one-hot")]
    NotOneHot,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("parameter gradients are missing; run a backward pass first")]
    MissingGradients,

    #[error("strategy {0} has no output normalization")]
    NoOutputNorm(String),

    #[error("bound undefined: {0}")]
    UndefinedBound(&'static str),

    #[error("every row has zero norm")]
    AllRowsZero,

    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },

    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("corpus has {have} tokens, need at least {need}")]
    CorpusTooSmall { have: usize, need: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("spec parse error: {0}")]
    Parse(String),

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
