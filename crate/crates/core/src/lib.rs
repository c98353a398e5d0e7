//! Adaptive timestep schedules for diffusion sampling.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artrl;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod formats;
pub mod nn;
pub mod ode;
pub mod par;
pub mod sampler;
pub mod schedule;
pub mod seed;

pub use error::{ArtError, Result};
