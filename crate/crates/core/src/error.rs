use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("step limit: episode already terminated (horizon {horizon})")]
    StepLimit { horizon: usize },
    #[error("invalid action {action}: vocabulary size is {vocab_size}")]
    InvalidAction { action: u32, vocab_size: u32 },
    #[error("unknown prompt id {0}")]
    UnknownPrompt(u32),
    #[error("enumeration too large: {states} states exceeds cap {cap}")]
    EnumerationTooLarge { states: u128, cap: u64 },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("trajectory has no behavior log-probabilities")]
    MissingLogprobs,
    #[error("advantage group too small: need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("per-step reward annotation required: task defines no hidden reward")]
    AnnotationRequired,
    #[error("label {0} outside [0, 1]")]
    LabelOutOfRange(f64),
    #[error("mixture density is zero for a sampled trajectory")]
    DegenerateSample,
    #[error("step index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short category tag used by the CLI for exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Parse { .. } => "config",
            Error::Io(_) => "io",
            Error::CheckpointMismatch(_) => "checkpoint",
            Error::EnumerationTooLarge { .. } => "enumeration",
            _ => "runtime",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
