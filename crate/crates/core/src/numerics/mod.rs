//! Dense row-major tensors with a reverse-mode tape.
//!
//! Everything the decoder needs is expressed through [`Graph`] operations, each of
//! which records enough state to produce exact analytic gradients. The code is
//! generic over [`Float`] so the same model runs in `f32` for training and serving
//! and in `f64` for finite-difference checks.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Float, Tensor};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;
