//! Linear attention, selective state space models and the gated recurrence
//! that unifies them, with the block designs and cost accounting of a
//! four-stage vision backbone built on top.
//!
//! Numerical code is generic over [`numerics::Scalar`] (`f32`/`f64`);
//! equivalence checks run in `f64`.

// `!(x > 0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod blocks;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod posenc;
pub mod scan;
pub mod ssm;
pub mod unified;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng, Scalar};

/// `N x C` tokens in double precision, the precision of all checks.
pub type TokenMatrix = numerics::Matrix<f64>;
/// Dense `f64` matrix (weights, states).
pub type DenseMatrix = numerics::Matrix<f64>;
/// Single-precision tokens, used for large model builds.
pub type TokenMatrix32 = numerics::Matrix<f32>;
