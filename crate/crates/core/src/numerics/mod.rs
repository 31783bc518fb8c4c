//! Dense linear algebra, nonlinearities and the seeded generator shared by
//! every mixer.

mod matrix;
pub mod ops;
mod rng;
mod scalar;

pub use matrix::Matrix;
pub use ops::{
    dot, elu_plus_one, exp_ew, gelu, hadamard, hadamard_row, layer_norm, matmul, matmul_par,
    matmul_tn, outer, relu_plus_eps, sigmoid, silu, softmax_rows, softplus, transpose,
};
pub use rng::Rng;
pub use scalar::Scalar;
