//! Differentiable pseudo-spectral solver for forced two-dimensional
//! quasi-geostrophic turbulence, with subgrid closures trained either on
//! instantaneous residuals or end-to-end through solver rollouts.

pub mod autodiff;
pub mod closures;
pub mod coarse;
pub mod config;
pub mod conv;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod io;
pub mod runner;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{QgError, Result};
pub use spectral::{Grid, RealField, SpectralField};
pub use tensor::Tensor;
