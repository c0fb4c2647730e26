use thiserror::Error;

/// Errors raised anywhere in the simulator or the cost model.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("extent {extent} on axis {axis} is not divisible by {parts}")]
    Divisibility {
        axis: usize,
        extent: usize,
        parts: usize,
    },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("simulation fault: {0}")]
    Simulation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown model preset `{0}`")]
    UnknownPreset(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),
}

pub type Result<T> = std::result::Result<T, Error>;
