use thiserror::Error;

pub type Result<T> = std::result::Result<T, GofarError>;

#[derive(Debug, Error)]
pub enum GofarError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("goal cell {cell:?} is unreachable from every start cell")]
    UnreachableGoal { cell: (usize, usize) },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("support violation in {what} at {location}")]
    Support { what: &'static str, location: String },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("fingerprint mismatch: dataset {found}, mdp {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("did not converge: flow residual {residual:e}")]
    NonConvergence { residual: f64 },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("plan revisits subgoal {goal} without reaching the final goal")]
    Cycle { goal: usize },

    #[error("plan stopped making progress after {step} subgoals")]
    NoProgress { step: usize },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
