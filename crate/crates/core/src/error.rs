use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    #[error("unknown category id {0}")]
    UnknownCategory(u8),

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("action {kind} cannot be converted to ego motion; use the trajectory sampler")]
    NonConvertibleAction { kind: &'static str },

    #[error("memory entries must have strictly increasing t (last {last}, got {got})")]
    NonMonotonicMemory { last: i64, got: i64 },

    #[error("memory queue is empty")]
    EmptyMemory,

    #[error("expected {expected} steps of actions, got {got}")]
    ActionCountMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no trajectory candidate survives the {0} command filter")]
    NoCandidates(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
