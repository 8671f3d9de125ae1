//! Markerless dynamic hand-object contact capture.
//!
//! Fits template-rigged 2D Gaussian surfels (hands) and rigid-pose-tracked
//! surfels (objects) to multi-view image sequences, then estimates
//! instantaneous and accumulated contact maps analytically from surfel
//! pair distances. Everything runs on the CPU in 64-bit floats with
//! hand-derived gradients; correctness is checked against brute-force and
//! finite-difference oracles.

pub mod contact;
pub mod geom;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod optim;
pub mod render;
pub mod synth;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
