use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("timestep {t} out of range for schedule with {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("imaginary DDIM coefficient: sigma^2 = {sigma_sq} exceeds 1 - alpha_bar_prev = {limit}")]
    ImaginaryCoefficient { sigma_sq: f64, limit: f64 },
    #[error("guidance signal does not match the denoiser: {0}")]
    GuidanceMismatch(String),
    #[error("invalid guidance signal: {0}")]
    InvalidGuidance(String),
    #[error("need at least {needed} points, got {got}")]
    NotEnoughPoints { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("matrix is not positive semi-definite (eigenvalue {0})")]
    NotPositiveSemiDefinite(f64),
    #[error("probability vector {index} is not normalized (sum {sum})")]
    NotNormalized { index: usize, sum: f64 },
    #[error("empty input")]
    EmptyInput,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        expected: alloc::format!("{expected:?}"),
        actual: alloc::format!("{actual:?}"),
    }
}
