//! Super-resolution under arbitrary image warps.
//!
//! The crate covers the geometric side (homographies, functional backward
//! maps, local Jacobians and the elliptical adaptive resampling grid), a
//! resampling engine, a small reverse-mode differentiable network library,
//! the warping super-resolution model built on it, synthetic pair
//! generation and masked evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive_grid;
pub mod cli;
pub mod data;
pub mod diffnet;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod warp;
pub mod xform;

pub use error::{Error, Result};
