//! Step-flow model of a periodic vicinal surface and its continuum limit.

pub mod analysis;
pub mod continuum;
pub mod error;
pub mod geometry;
pub mod hilbert_quadrature;
pub mod integrator;
pub mod mesoscopic;
pub mod spectral;

pub use error::{Result, StepflowError};
