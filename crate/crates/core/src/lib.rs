//! Geometry toolkit for monocular scene flow.
//!
//! - [`tensors`]: float grids, validity masks and the on-disk sample container.
//! - [`camera`]: pinhole projection, rigid poses and subpixel sampling.
//! - [`recipe`]: pseudo ground-truth scene flow from depth, flow and pose.
//! - [`param`]: conversions between offset, depth-change + flow and end-point forms.
//! - [`optim`]: scale-adaptive losses, subgradients and a direct fitter.
//! - [`eval`]: scene-flow and depth metrics and a batch evaluation harness.
//! - [`synthworld`]: analytic scenes used as an independent oracle.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod error;
pub mod eval;
pub mod optim;
pub mod param;
pub mod recipe;
pub mod synthworld;
pub mod tensors;

pub use error::{Error, Result};
