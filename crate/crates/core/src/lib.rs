//! Curvature laboratory for small neural classifiers.
//!
//! Trains networks, measures the curvature of the loss with respect to the
//! input through finite-difference Hessian-vector products, attacks models
//! with gradient-based and gradient-free adversaries, fine-tunes with a
//! curvature penalty and checks the quadratic robustness bounds numerically.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod cure;
pub mod curvature;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::Tensor;
