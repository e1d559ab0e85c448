//! Trainable image denoising by unrolled constrained proximal-gradient iterations.
//!
//! Each composite layer applies a learned analysis operator `L` (a normalized
//! convolution, optionally followed by block-matching collaborative filtering),
//! a clipped RBF-mixture nonlinearity, the adjoint `Lᵀ`, and a projection onto
//! the noise ball `‖x − y‖₂ ≤ ε`. Every layer carries an analytic backward pass.

pub mod checkpoint;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod image;
pub mod network;
pub mod nonlocal;
pub mod pnm;
pub mod projection;
pub mod rbf;
pub mod real;
pub mod synth;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use image::{FeatureMap, Planes, PlanarImage};
pub use real::Real;
