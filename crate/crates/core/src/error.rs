use thiserror::Error;

#[derive(Debug, Error)]
pub enum IkError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("batch norm in train mode needs a batch of at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("non-finite loss at sample {index}")]
    NonFiniteLoss { index: usize },

    #[error("joint {joint} angle {angle} outside limits [{lo}, {hi}]")]
    JointLimit {
        joint: usize,
        angle: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("expected {expected} joint angles, got {got}")]
    JointCount { expected: usize, got: usize },

    #[error("primary network {joint} expects {expected} conditioning angles, got {got}")]
    PrimaryInput {
        joint: usize,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("empty input")]
    Empty,

    #[error("unknown preset '{name}'; available: {available}")]
    UnknownPreset { name: String, available: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl IkError {
    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        IkError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            IkError::NonFiniteGradient(_)
                | IkError::NonFiniteLoss { .. }
                | IkError::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, IkError>;
