use thiserror::Error;

/// Errors raised by the step-flow laboratory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepflowError {
    #[error("profile not monotone: |A| = {amplitude} must be < 1")]
    ProfileNotMonotone { amplitude: f64 },

    #[error("grid size {size} must be a power of two >= {min}")]
    GridSize { size: usize, min: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("inverse undefined: field is not strictly monotone")]
    InverseUndefined,

    #[error("inversion failed at target {target}")]
    InversionFailed { target: f64 },

    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),

    #[error("collision in quadrature at node {index}")]
    QuadratureCollision { index: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid step train: {0}")]
    InvalidTrain(String),

    #[error("sampling produced collision at step {index}")]
    SamplingCollision { index: usize },

    #[error("step collision at t = {time}: spacing {spacing} below threshold {threshold}")]
    StepCollision {
        time: f64,
        spacing: f64,
        threshold: f64,
    },

    #[error("monotonicity lost at t = {time}: slope {slope} violates bound {bound}")]
    MonotonicityLost { time: f64, slope: f64, bound: f64 },

    #[error("step-size underflow at t = {time}: dt = {dt}")]
    StepSizeUnderflow { time: f64, dt: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("sub-run failed for N = {steps}: {source}")]
    SubRun {
        steps: usize,
        #[source]
        source: Box<StepflowError>,
    },
}

pub type Result<T> = std::result::Result<T, StepflowError>;

impl StepflowError {
    /// Strips `SubRun` wrappers down to the originating error.
    pub fn root(&self) -> &StepflowError {
        match self {
            StepflowError::SubRun { source, .. } => source.root(),
            other => other,
        }
    }
}
