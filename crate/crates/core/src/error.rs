use thiserror::Error;

/// Errors raised by the simulator and calibration engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch at {stage}: expected {expected}, got {actual}")]
    Dimension {
        stage: String,
        expected: String,
        actual: String,
    },

    #[error("singular geometry: distance {distance:e} m is below the guard {guard:e} m")]
    Singularity { distance: f64, guard: f64 },

    #[error("reference matrix is all zero; NMSE undefined")]
    ZeroReference,

    #[error("empty measurement set")]
    EmptyMeasurements,

    #[error("empty codebook: {0}")]
    EmptyCodebook(String),

    #[error("optimizer diverged: loss {loss:e} exceeds 10x initial {initial:e} at iteration {iteration}")]
    Diverged {
        loss: f64,
        initial: f64,
        iteration: usize,
    },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("io: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

impl SimError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SimError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dimension(
        stage: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        SimError::Dimension {
            stage: stage.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
