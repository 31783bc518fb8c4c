//! Positional encodings that can stand in for a forget gate: absolute
//! tables, locally-enhanced (LePE) and conditional (CPE) depthwise
//! convolutions, and 2D axial rotary embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Matrix, Rng, Scalar};

/// Row-major `height x width` token layout: token `r * width + c` sits at
/// `(r, c)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid2D {
    pub height: usize,
    pub width: usize,
}

impl Grid2D {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err("Grid2D", format!("empty grid {height}x{width}")));
        }
        Ok(Self { height, width })
    }

    /// A single row of `n` tokens, for 1D sequences.
    pub fn line(n: usize) -> Self {
        Self { height: 1, width: n }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn position(&self, token: usize) -> (usize, usize) {
        (token / self.width, token % self.width)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub(crate) fn check<T: Scalar>(&self, x: &Matrix<T>, op: &'static str) -> Result<()> {
        if x.rows() != self.tokens() {
            return Err(shape_err(
                op,
                format!("{} tokens on a {}x{} grid", x.rows(), self.height, self.width),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncKind {
    Ape,
    Lepe,
    Cpe,
    Rope,
    None,
}

/// One positional encoding and its hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosEncSpec {
    pub kind: PosEncKind,
    #[serde(default = "default_kernel")]
    pub dwconv_kernel: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_kernel() -> usize {
    3
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl PosEncSpec {
    pub fn new(kind: PosEncKind) -> Self {
        Self {
            kind,
            dwconv_kernel: default_kernel(),
            rope_base: default_rope_base(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dwconv_kernel == 0 || self.dwconv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depthwise kernel size must be odd, got {}",
                self.dwconv_kernel
            )));
        }
        if !(self.rope_base > 1.0) || !self.rope_base.is_finite() {
            return Err(Error::Config(format!("rope base must exceed 1, got {}", self.rope_base)));
        }
        Ok(())
    }
}

/// Adds a learned absolute position table (`N x C`) to the tokens.
pub fn ape_add<T: Scalar>(x: &Matrix<T>, table: &Matrix<T>) -> Result<Matrix<T>> {
    x.add(table)
}

/// Per-channel `k x k` filters; row `c` of `weights` holds channel `c`'s
/// filter in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseKernel<T> {
    pub size: usize,
    pub weights: Matrix<T>,
}

impl<T: Scalar> DepthwiseKernel<T> {
    pub fn new(size: usize, weights: Matrix<T>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {size}")));
        }
        if weights.cols() != size * size {
            return Err(shape_err("DepthwiseKernel", format!("{} taps for a {size}x{size} filter", weights.cols())));
        }
        Ok(Self { size, weights })
    }

    pub fn zeros(channels: usize, size: usize) -> Result<Self> {
        Self::new(size, Matrix::zeros(channels, size * size))
    }

    /// Centre tap 1, every other tap 0.
    pub fn identity(channels: usize, size: usize) -> Result<Self> {
        let centre = size * size / 2;
        Self::new(size, Matrix::from_fn(channels, size * size, |_, t| if t == centre { T::one() } else { T::zero() }))
    }

    pub fn random(channels: usize, size: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / size as f64;
        Self::new(size, rng.uniform_matrix(channels, size * size, -bound, bound))
    }

    pub fn channels(&self) -> usize {
        self.weights.rows()
    }
}

/// Depthwise 2D convolution (cross-correlation) with zero "same" padding.
pub fn depthwise_conv2d<T: Scalar>(x: &Matrix<T>, grid: Grid2D, kernel: &DepthwiseKernel<T>) -> Result<Matrix<T>> {
    grid.check(x, "depthwise_conv2d")?;
    let c = x.cols();
    if kernel.channels() != c {
        return Err(shape_err("depthwise_conv2d", format!("kernel for {} channels, input has {c}", kernel.channels())));
    }
    let k = kernel.size as isize;
    let pad = k / 2;
    let (h, w) = (grid.height as isize, grid.width as isize);
    let mut out = Matrix::zeros(x.rows(), c);
    for r in 0..h {
        for col in 0..w {
            let o = grid.index(r as usize, col as usize);
            for dr in 0..k {
                let rr = r + dr - pad;
                if rr < 0 || rr >= h {
                    continue;
                }
                for dc in 0..k {
                    let cc = col + dc - pad;
                    if cc < 0 || cc >= w {
                        continue;
                    }
                    let tap = (dr * k + dc) as usize;
                    let src = grid.index(rr as usize, cc as usize);
                    let src_row = x.row(src);
                    for (ch, dst) in out.row_mut(o).iter_mut().enumerate() {
                        *dst += kernel.weights.get(ch, tap) * src_row[ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Locally-enhanced positional encoding: the attention output plus a
/// depthwise convolution of the values.
pub fn lepe<T: Scalar>(attn: &Matrix<T>, v: &Matrix<T>, grid: Grid2D, kernel: &DepthwiseKernel<T>) -> Result<Matrix<T>> {
    attn.add(&depthwise_conv2d(v, grid, kernel)?)
}

/// Conditional positional encoding: `x + dwconv(x)`.
pub fn cpe<T: Scalar>(x: &Matrix<T>, grid: Grid2D, kernel: &DepthwiseKernel<T>) -> Result<Matrix<T>> {
    x.add(&depthwise_conv2d(x, grid, kernel)?)
}

/// Precomputed 2D axial rotary tables for one grid and head layout.
///
/// Within each head of width `w` (a multiple of 4) the first `w/2` channels
/// encode the row index and the rest the column index. Pair `m` of an axis
/// half rotates by `pos * base^(-2m / (w/2))`.
#[derive(Clone, Debug)]
pub struct Rope<T> {
    grid: Grid2D,
    heads: usize,
    head_width: usize,
    // `N x w/2`: one angle per rotated pair of a head.
    cos: Matrix<T>,
    sin: Matrix<T>,
}

impl<T: Scalar> Rope<T> {
    pub fn new(grid: Grid2D, channels: usize, heads: usize, base: f64) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(shape_err("rope", format!("{heads} heads do not divide {channels} channels")));
        }
        let head_width = channels / heads;
        if !head_width.is_multiple_of(4) {
            return Err(shape_err("rope", format!("per-head width {head_width} is not a multiple of 4")));
        }
        if !(base > 1.0) {
            return Err(Error::Config(format!("rope base must exceed 1, got {base}")));
        }
        let axis = head_width / 2;
        let pairs = axis / 2;
        let theta: Vec<f64> = (0..pairs).map(|m| base.powf(-2.0 * m as f64 / axis as f64)).collect();
        let n = grid.tokens();
        let angle = |t: usize, p: usize| {
            let (r, c) = grid.position(t);
            if p < pairs {
                r as f64 * theta[p]
            } else {
                c as f64 * theta[p - pairs]
            }
        };
        Ok(Self {
            grid,
            heads,
            head_width,
            cos: Matrix::from_fn(n, 2 * pairs, |t, p| T::lit(angle(t, p).cos())),
            sin: Matrix::from_fn(n, 2 * pairs, |t, p| T::lit(angle(t, p).sin())),
        })
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    /// Rotates every head of every token of `x` (`N x C`).
    pub fn rotate(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.grid.check(x, "rope")?;
        if x.cols() != self.heads * self.head_width {
            return Err(shape_err("rope", format!("{} channels, tables built for {}", x.cols(), self.heads * self.head_width)));
        }
        let mut out = x.clone();
        for t in 0..x.rows() {
            let (cos, sin) = (self.cos.row(t), self.sin.row(t));
            let row = out.row_mut(t);
            for h in 0..self.heads {
                let head = &mut row[h * self.head_width..(h + 1) * self.head_width];
                for (p, pair) in head.chunks_exact_mut(2).enumerate() {
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = a * cos[p] - b * sin[p];
                    pair[1] = a * sin[p] + b * cos[p];
                }
            }
        }
        Ok(out)
    }
}

/// One-shot 2D axial rotary embedding of queries or keys.
pub fn rope_rotate<T: Scalar>(x: &Matrix<T>, grid: Grid2D, heads: usize, base: f64) -> Result<Matrix<T>> {
    Rope::new(grid, x.cols(), heads, base)?.rotate(x)
}
