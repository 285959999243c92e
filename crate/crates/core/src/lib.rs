//! Variational integrator networks: neural networks whose layers are
//! symplectic (or Lie group) discretizations of learned equations of
//! motion, together with baselines, ground-truth simulators and the
//! training and evaluation pipelines built on top of them.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the experiment pipelines.

pub mod diff;
mod error;
pub mod io;
pub mod models;
pub mod physics;
pub mod pixelvae;
pub mod rng;
pub mod scalar;
pub mod statespace;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision of the experiment pipelines.
pub type Real = f64;

pub type Tensor64 = diff::Tensor<f64>;
pub type Tensor32 = diff::Tensor<f32>;
pub type Tape64 = diff::Tape<f64>;
pub type Mlp64 = diff::Mlp1<f64>;
pub type Adam64 = diff::Adam<f64>;
