//! Dense layers shared by the block designs and the model builder.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{gelu, layer_norm, matmul, silu, Matrix, Rng, Scalar};
use crate::posenc::{DepthwiseKernel, Grid2D};
use crate::unified::UnifiedParams;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => silu(x),
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    pub fn apply_matrix<T: Scalar>(self, m: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Identity => m.clone(),
            _ => m.map(|v| self.apply(v)),
        }
    }
}

/// Walks every learnable tensor, reporting its name and scalar count.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize));

    /// Exact number of allocated scalars.
    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, n| total += n);
        total
    }

    /// `(name, count)` for every tensor, in declaration order.
    fn registry(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, n| out.push((name.to_string(), n)));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(shape_err("Linear", format!("bias of {} for {} outputs", b.len(), weight.cols())));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn random(fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let weight = rng.init_weight(fan_in, fan_out);
        let bias = bias.then(|| vec![T::zero(); fan_out]);
        Self { weight, bias }
    }

    pub fn in_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let y = matmul(x, &self.weight)?;
        match &self.bias {
            Some(b) => y.add_row_broadcast(b),
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Parameterized for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize)) {
        f(&join(prefix, "weight"), self.weight.rows() * self.weight.cols());
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b.len());
        }
    }
}

/// Per-token layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        layer_norm(x, &self.gamma, &self.beta, T::lit(NORM_EPS))
    }
}

impl<T: Scalar> Parameterized for LayerNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize)) {
        f(&join(prefix, "gamma"), self.gamma.len());
        f(&join(prefix, "beta"), self.beta.len());
    }
}

impl<T: Scalar> Parameterized for DepthwiseKernel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize)) {
        f(&join(prefix, "weight"), self.weights.rows() * self.weights.cols());
    }
}

impl<T: Scalar> Parameterized for UnifiedParams<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize)) {
        let size = |m: &Matrix<T>| m.rows() * m.cols();
        f(&join(prefix, "w_q"), size(&self.w_q));
        f(&join(prefix, "w_k"), size(&self.w_k));
        if let Some(m) = &self.w_v {
            f(&join(prefix, "w_v"), size(m));
        }
        if let Some(a) = &self.a_diag {
            f(&join(prefix, "a_diag"), a.len());
        }
        if let Some(m) = &self.w_1 {
            f(&join(prefix, "w_1"), size(m));
        }
        if let Some(m) = &self.w_2 {
            f(&join(prefix, "w_2"), size(m));
        }
        if let Some(d) = &self.d_skip {
            f(&join(prefix, "d_skip"), d.len());
        }
    }
}

/// Dense 2D convolution over a token grid. The weight is stored
/// `(k*k*C_in) x C_out`, rows ordered (tap row, tap column, input channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn random(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, rng: &mut Rng) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("convolution kernel and stride must be positive".into()));
        }
        Ok(Self {
            weight: rng.init_weight(kernel * kernel * c_in, c_out),
            bias: vec![T::zero(); c_out],
            kernel,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.rows() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_grid(&self, grid: Grid2D) -> Result<Grid2D> {
        conv_output_grid(grid, self.kernel, self.stride, self.padding)
    }

    /// Returns the output tokens and their grid.
    pub fn forward(&self, x: &Matrix<T>, grid: Grid2D) -> Result<(Matrix<T>, Grid2D)> {
        grid.check(x, "conv2d")?;
        let c_in = self.in_channels();
        if x.cols() != c_in {
            return Err(shape_err("conv2d", format!("input has {} channels, kernel expects {c_in}", x.cols())));
        }
        let out_grid = self.output_grid(grid)?;
        let k = self.kernel;
        let (h, w) = (grid.height as isize, grid.width as isize);
        let mut patches = Matrix::zeros(out_grid.tokens(), k * k * c_in);
        for orow in 0..out_grid.height {
            for ocol in 0..out_grid.width {
                let dst = patches.row_mut(out_grid.index(orow, ocol));
                for dr in 0..k {
                    let r = (orow * self.stride + dr) as isize - self.padding as isize;
                    if r < 0 || r >= h {
                        continue;
                    }
                    for dc in 0..k {
                        let c = (ocol * self.stride + dc) as isize - self.padding as isize;
                        if c < 0 || c >= w {
                            continue;
                        }
                        let off = (dr * k + dc) * c_in;
                        dst[off..off + c_in].copy_from_slice(x.row(grid.index(r as usize, c as usize)));
                    }
                }
            }
        }
        let y = matmul(&patches, &self.weight)?.add_row_broadcast(&self.bias)?;
        Ok((y, out_grid))
    }
}

impl<T: Scalar> Parameterized for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize)) {
        f(&join(prefix, "weight"), self.weight.rows() * self.weight.cols());
        f(&join(prefix, "bias"), self.bias.len());
    }
}

pub fn conv_output_grid(grid: Grid2D, kernel: usize, stride: usize, padding: usize) -> Result<Grid2D> {
    let dim = |n: usize| -> Result<usize> {
        let span = n + 2 * padding;
        if span < kernel {
            return Err(shape_err("conv2d", format!("{n} pixels with padding {padding} is smaller than kernel {kernel}")));
        }
        Ok((span - kernel) / stride + 1)
    };
    Grid2D::new(dim(grid.height)?, dim(grid.width)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = Rng::new(1);
        let grid = Grid2D::new(5, 6).unwrap();
        let x = rng.uniform_matrix::<f64>(30, 3, -1.0, 1.0);
        let conv = Conv2d::<f64>::random(3, 4, 3, 2, 1, &mut rng).unwrap();
        let (y, g) = conv.forward(&x, grid).unwrap();
        assert_eq!((g.height, g.width), (3, 3));
        for orow in 0..3 {
            for ocol in 0..3 {
                for co in 0..4 {
                    let mut acc = conv.bias[co];
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let (r, c) = ((orow * 2 + dr) as isize - 1, (ocol * 2 + dc) as isize - 1);
                            if r < 0 || c < 0 || r >= 5 || c >= 6 {
                                continue;
                            }
                            for ci in 0..3 {
                                acc += conv.weight.get((dr * 3 + dc) * 3 + ci, co) * x.get(grid.index(r as usize, c as usize), ci);
                            }
                        }
                    }
                    assert!((acc - y.get(g.index(orow, ocol), co)).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn registry_counts_tensors() {
        let mut rng = Rng::new(2);
        let l = Linear::<f32>::random(4, 3, true, &mut rng);
        assert_eq!(l.registry(), vec![("weight".to_string(), 12), ("bias".to_string(), 3)]);
        assert_eq!(Conv2d::<f32>::random(3, 8, 3, 2, 1, &mut rng).unwrap().param_count(), 27 * 8 + 8);
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Identity.apply(-2.0f64), -2.0);
        assert!((Activation::Silu.apply(1.0f64) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!(Activation::Gelu.apply(-10.0f64).abs() < 1e-12);
    }
}
