//! Few-step unbiased sampling of Boltzmann-type densities.
//!
//! The crate trains score-based diffusion models on analytic targets, distills
//! bidirectional consistency trajectory models from them, and corrects model
//! error with self-normalized importance sampling in the joint space of the
//! whole sampling trajectory.

pub mod error;
pub mod harness;
pub mod is_engine;
pub mod numerics;
pub mod sampling;
pub mod schedule_opt;
pub mod models;
pub mod targets;
pub mod training;

pub use error::{Error, Result};

/// Smallest diffusion time.
pub const EPS: f64 = 0.002;
/// Largest diffusion time.
pub const T_MAX: f64 = 80.0;
