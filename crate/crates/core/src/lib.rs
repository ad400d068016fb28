//! Numerical toolkit for the heat equation `∂ₜψ = ½∂ₓ²ψ + g S² ψ` driven by
//! the square of a stationary Gaussian field `S`.

pub mod diagnostics;
pub mod error;
pub mod extremes;
pub mod feynman_kac;
pub mod field_synthesis;
pub mod heat_solver;
pub mod path_spectrum;
pub mod quadrature;
pub mod rng;
pub mod spectral_model;

pub use error::{Error, Result};
