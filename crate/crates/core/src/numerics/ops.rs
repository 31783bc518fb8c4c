//! Dense kernels and pointwise nonlinearities.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::numerics::{Matrix, Scalar};

fn check_matmul(a_cols: usize, b_rows: usize) -> Result<()> {
    if a_cols != b_rows {
        return Err(shape_err(
            "matmul",
            format!("inner dimensions {a_cols} and {b_rows} differ"),
        ));
    }
    Ok(())
}

#[inline]
fn matmul_row<T: Scalar>(a_row: &[T], b: &Matrix<T>, out: &mut [T]) {
    // i-k-j order: every output element accumulates over k ascending, the
    // same order as the textbook triple loop.
    for (k, &aik) in a_row.iter().enumerate() {
        if aik == T::zero() {
            continue;
        }
        for (o, &bkj) in out.iter_mut().zip(b.row(k)) {
            *o += aik * bkj;
        }
    }
}

/// Matrix product `a * b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_matmul(a.cols(), b.rows())?;
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        matmul_row(a.row(i), b, out.row_mut(i));
    }
    Ok(out)
}

/// Row-parallel matrix product; bitwise identical to [`matmul`] for any
/// thread count because each output row is computed by the same serial code.
pub fn matmul_par<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_matmul(a.cols(), b.rows())?;
    let mut out = Matrix::zeros(a.rows(), b.cols());
    let n = b.cols();
    if n == 0 {
        return Ok(out);
    }
    out.as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| matmul_row(a.row(i), b, row));
    Ok(out)
}

/// `a^T * b` without materialising the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows() != b.rows() {
        return Err(shape_err(
            "matmul_tn",
            format!("row counts {} and {} differ", a.rows(), b.rows()),
        ));
    }
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let b_row = b.row(r);
        for (k, &aik) in a.row(r).iter().enumerate() {
            for (o, &bv) in out.row_mut(k).iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

pub fn transpose<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(m.cols(), m.rows(), |i, j| m.get(j, i))
}

/// Outer product `u^T v` of two vectors.
pub fn outer<T: Scalar>(u: &[T], v: &[T]) -> Matrix<T> {
    Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}

pub fn hadamard<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

/// Multiplies every row of `m` elementwise by `row`.
pub fn hadamard_row<T: Scalar>(m: &Matrix<T>, row: &[T]) -> Result<Matrix<T>> {
    if row.len() != m.cols() {
        return Err(shape_err(
            "hadamard_row",
            format!("row of {} vs {} columns", row.len(), m.cols()),
        ));
    }
    let mut out = m.clone();
    for i in 0..m.rows() {
        for (o, &r) in out.row_mut(i).iter_mut().zip(row) {
            *o *= r;
        }
    }
    Ok(out)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn exp_ew<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(T::exp)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `elu(x) + 1`: `x + 1` for positive `x`, `e^x` otherwise. Strictly
/// positive wherever `e^x` does not underflow.
pub fn elu_plus_one<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

pub fn relu_plus_eps<T: Scalar>(x: T, eps: T) -> T {
    x.max(T::zero()) + eps
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(0.044715) * x * x * x)).tanh())
}

/// Per-row layer normalization followed by an affine map.
pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Matrix<T>> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err("layer_norm", format!("affine params do not match {c} channels")));
    }
    let n = T::from_usize(c).unwrap();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}
