//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Every coupling in the vector is zero, so no basis scale exists.
    #[error("degenerate coupling vector: all couplings are zero")]
    DegenerateCoupling,

    /// A dark-basis denominator fell below the singularity threshold.
    #[error("dark basis singular: denominator for vector {index} below threshold")]
    SingularDarkBasis { index: usize },

    /// The dark basis could not be built at some instant of a schedule.
    #[error("dark basis singular at t = {t}")]
    SingularBasisAtTime { t: f64 },

    /// The emission direction requires at least one nonzero microwave coupling.
    #[error("emission direction undefined: all microwave couplings vanish")]
    EmissionDirectionUndefined,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// A schedule, pulse, or state was paired with a grid of different extent.
    #[error("duration mismatch: {left} vs {right}")]
    DurationMismatch { left: f64, right: f64 },

    /// The integrator produced a non-finite amplitude.
    #[error("integration produced a non-finite state at t = {t}")]
    IntegrationFailure { t: f64 },

    /// An ansatz amplitude exceeded its configured bound.
    #[error("amplitude {value} exceeds bound {bound}")]
    AmplitudeBound { value: f64, bound: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
