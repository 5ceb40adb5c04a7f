use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A mollification ball or a trajectory left the declared state domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported state dimension {0} (mollification is limited to 1..=3)")]
    UnsupportedDimension(usize),

    #[error("step count too small: dt * L = {dt_l:.3e} exceeds 0.5")]
    StepCountTooSmall { dt_l: f64 },

    #[error("infeasible start at j = {j}: {reason}")]
    InfeasibleStart { j: u32, reason: String },

    #[error("empty j-sequence")]
    EmptyJSequence,

    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
