use thiserror::Error;

pub type Result<T, E = CdsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CdsError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),

    #[error("iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("linear system is singular")]
    Singular,

    #[error("Q-value divergence: task {task}, state {state}, action {action}, value {value} exceeds cap {cap}")]
    Divergence {
        task: usize,
        state: usize,
        action: usize,
        value: f64,
        cap: f64,
    },

    #[error("behavior target unreachable: {0}")]
    TargetUnreachable(String),

    #[error("replay buffer holds {available} transitions, {requested} requested")]
    BufferTooSmall { available: usize, requested: usize },

    #[error("support violation: q(x) = 0 where p(x) = {0}")]
    SupportViolation(f64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CdsError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CdsError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the harness: 2 for configuration errors, 3 for runtime faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            CdsError::Config { .. } => 2,
            _ => 3,
        }
    }
}
