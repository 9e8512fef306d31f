use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("corpus contains no tokens")]
    EmptyCorpus,

    #[error("word `{0}` is not in the embedding table")]
    MissingWord(String),

    #[error("requested {requested} negative ROIs but only {available} are available")]
    NotEnoughRois { requested: usize, available: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss in batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("batch-norm running statistics are uninitialized; train at least one step first")]
    UninitializedRunningStats,

    #[error("degenerate box {0:?}: need x1 < x2 and y1 < y2")]
    DegenerateBox([f64; 4]),

    #[error("no ground-truth boxes for image `{0}`")]
    MissingGroundTruth(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("id `{0}` has no matching record")]
    IdMismatch(String),

    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    FeatureDimMismatch { expected: usize, found: usize },

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionUnsupported { found: u16, supported: u16 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, lhs, rhs }
    }

    /// True for errors that originate from numerical problems rather than
    /// bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::UninitializedRunningStats
        )
    }
}
