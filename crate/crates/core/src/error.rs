use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("unknown variant name `{0}`")]
    UnknownVariant(String),

    #[error("instance generation failed: {0}")]
    Generation(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("infeasible action {action} in state at step {step}")]
    InfeasibleAction { action: usize, step: usize },

    #[error("no feasible action in a reachable state (internal consistency)")]
    NoFeasibleAction,

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("masked softmax row {row} has no unmasked entry")]
    AllMasked { row: usize },

    #[error("backward pass error: {0}")]
    Backward(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
