use thiserror::Error;

/// Errors produced anywhere in the attribution pipeline.
#[derive(Debug, Error)]
pub enum HetaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("expected a scalar (0-dimensional) tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("token id {id} is out of vocabulary (size {vocab})")]
    OutOfVocab { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds the model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("range finder breakdown on token {token}: every probe was annihilated")]
    RangeFinderBreakdown { token: usize },

    #[error("power iteration did not converge after {steps} steps (last change {change:e})")]
    PowerIteration { steps: usize, change: f64 },

    #[error("training did not reach accuracy {target:.3} within {steps} steps (got {achieved:.3})")]
    NonConvergence {
        steps: usize,
        target: f64,
        achieved: f64,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error("malformed input at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("incompatible vocabulary: {0}")]
    VocabMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HetaError>;
