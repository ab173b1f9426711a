use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("non-finite sample in `{channel}` at index {index}")]
    NonFiniteSample { channel: &'static str, index: usize },

    #[error("series of length {len} is too short for the model order (need more than {required})")]
    TooShortForOrder { len: usize, required: usize },

    #[error("invalid model order: {0}")]
    InvalidOrder(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimError { expected: usize, got: usize },

    #[error("hyper-parameter index {index} out of range (have {count})")]
    IndexError { index: usize, count: usize },

    #[error("matrix is not positive definite after jitter escalation ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("numerically negative variance {0:e}")]
    NumericalNegativeVariance(f64),

    #[error("cannot select {requested} inducing points from {available} rows")]
    TooManyInducing { requested: usize, available: usize },

    #[error("inducing set must contain at least one point")]
    EmptyInducing,

    #[error("cutoff {0} outside the open interval (0, 1)")]
    InvalidCutoff(f64),

    #[error("variance must be strictly positive, found {0:e} at index {1}")]
    NonPositiveVariance(f64, usize),

    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("cannot set SNR on an output with zero variance")]
    CannotSetSnr,

    #[error("unsupported model schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, with stage tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
