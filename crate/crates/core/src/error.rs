use alloc::string::String;

/// Errors raised by the core model crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Index { axis: usize, rank: usize },
    #[error("expected a scalar, got rank-{0} tensor of {1} elements")]
    Rank(usize, usize),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("position {requested} exceeds table capacity {capacity}")]
    Capacity { requested: usize, capacity: usize },
    #[error("loss mask selects no positions")]
    DegenerateLoss,
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter partition violated: {0}")]
    Partition(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
