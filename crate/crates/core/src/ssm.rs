//! Zero-order-hold discretization, the discrete SSM recurrence and the
//! per-channel selective scan with input-dependent `B`, `C` and `Δ`.
//!
//! The continuous system `h'(t) = A h(t) + B x(t)` only serves as the origin
//! of [`discretize`]; no ODE integrator is provided.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{matmul, softplus, Matrix, Rng, Scalar};
use crate::scan::{chunk_carries, ScanElement};

/// How `B̄` is derived from `B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discretization {
    /// `B̄ = (ΔA)^{-1}(exp(ΔA) - I) ΔB`.
    ExactZoh,
    /// `B̄ = ΔB`, the first-order approximation used by selective SSMs.
    Simplified,
}

/// Diagonal `Ā` and the matching `B̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedPair<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

/// Discretizes a diagonal system over timescale `delta`.
pub fn discretize<T: Scalar>(a_diag: &[T], b: &[T], delta: T, mode: Discretization) -> Result<DiscretizedPair<T>> {
    if !(delta > T::zero()) || !delta.is_finite() {
        return Err(Error::Domain(format!("timescale must be positive and finite, got {delta}")));
    }
    if a_diag.len() != b.len() {
        return Err(shape_err("discretize", format!("A has {} entries, B has {}", a_diag.len(), b.len())));
    }
    let a_bar = a_diag.iter().map(|&a| (delta * a).exp()).collect();
    let b_bar = a_diag
        .iter()
        .zip(b)
        .map(|(&a, &bv)| match mode {
            Discretization::Simplified => delta * bv,
            // (exp(Δa) - 1) / a, with the Δ limit at a = 0.
            Discretization::ExactZoh if a == T::zero() => delta * bv,
            Discretization::ExactZoh => (delta * a).exp_m1() / a * bv,
        })
        .collect();
    Ok(DiscretizedPair { a_bar, b_bar })
}

/// `|B̄_simplified - B̄_exact| / |B̄_simplified|` for a scalar system.
pub fn discretization_gap<T: Scalar>(a: T, b: T, delta: T) -> Result<T> {
    let exact = discretize(&[a], &[b], delta, Discretization::ExactZoh)?.b_bar[0];
    let simple = discretize(&[a], &[b], delta, Discretization::Simplified)?.b_bar[0];
    Ok((simple - exact).abs() / simple.abs())
}

/// A single-input single-output discrete SSM with fixed parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarSsm<T> {
    /// `d x d` state transition.
    pub a_bar: Matrix<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
    pub d: T,
}

/// `h_i = Ā h_{i-1} + B̄ x_i`, `y_i = C h_i + D x_i` from `h_0 = 0`.
pub fn discrete_ssm_scalar<T: Scalar>(x: &[T], p: &ScalarSsm<T>) -> Result<Vec<T>> {
    let n = p.b_bar.len();
    if p.a_bar.shape() != (n, n) || p.c.len() != n {
        return Err(shape_err("discrete_ssm_scalar", "Ā, B̄ and C disagree on the state width"));
    }
    let mut h = vec![T::zero(); n];
    let mut next = vec![T::zero(); n];
    Ok(x.iter()
        .map(|&xi| {
            for (r, nr) in next.iter_mut().enumerate() {
                *nr = crate::numerics::dot(p.a_bar.row(r), &h) + p.b_bar[r] * xi;
            }
            std::mem::swap(&mut h, &mut next);
            crate::numerics::dot(&p.c, &h) + p.d * xi
        })
        .collect())
}

/// Default low-rank width of the `Δ` projection: `max(1, C/16)`.
pub fn default_low_rank(channels: usize) -> usize {
    (channels / 16).max(1)
}

/// Parameters of a per-channel selective SSM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    /// Diagonal of `A`, length `d`, strictly negative.
    pub a_diag: Vec<T>,
    /// `C x d`; `B_i = (x_i W_B)^T`.
    pub w_b: Matrix<T>,
    /// `C x d`; `C_i = x_i W_C`.
    pub w_c: Matrix<T>,
    /// `C x C0`
    pub w_1: Matrix<T>,
    /// `C0 x C`; `Δ_i = softplus(x_i W_1 W_2)`.
    pub w_2: Matrix<T>,
    /// Shortcut vector `D`, length `C`.
    pub d_skip: Vec<T>,
}

/// Per-token quantities derived from the input.
#[derive(Clone, Debug)]
pub struct Selection<T> {
    /// `N x d`; row `i` is `B_i^T`.
    pub b: Matrix<T>,
    /// `N x d`; row `i` is `C_i`.
    pub c: Matrix<T>,
    /// `N x C`, strictly positive.
    pub delta: Matrix<T>,
}

/// Negative diagonal `-exp(u)`, `u ~ U[-4, 0]`.
pub fn init_a_diag<T: Scalar>(state: usize, rng: &mut Rng) -> Vec<T> {
    (0..state).map(|_| T::lit(-rng.uniform(-4.0, 0.0).exp())).collect()
}

impl<T: Scalar> SsmParams<T> {
    pub fn new(a_diag: Vec<T>, w_b: Matrix<T>, w_c: Matrix<T>, w_1: Matrix<T>, w_2: Matrix<T>, d_skip: Vec<T>) -> Result<Self> {
        let p = Self {
            a_diag,
            w_b,
            w_c,
            w_1,
            w_2,
            d_skip,
        };
        p.validate()?;
        Ok(p)
    }

    /// Random layer: uniform fan-in weights, log-spaced negative `A`, `D = 1`.
    pub fn random(channels: usize, state: usize, low_rank: Option<usize>, rng: &mut Rng) -> Result<Self> {
        let c0 = low_rank.unwrap_or_else(|| default_low_rank(channels));
        Self::new(
            init_a_diag(state, rng),
            rng.init_weight(channels, state),
            rng.init_weight(channels, state),
            rng.init_weight(channels, c0),
            rng.init_weight(c0, channels),
            vec![T::one(); channels],
        )
    }

    pub fn channels(&self) -> usize {
        self.w_b.rows()
    }

    pub fn state_width(&self) -> usize {
        self.a_diag.len()
    }

    pub fn low_rank(&self) -> usize {
        self.w_1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d, c0) = (self.w_b.rows(), self.a_diag.len(), self.w_1.cols());
        let ok = self.w_b.shape() == (c, d)
            && self.w_c.shape() == (c, d)
            && self.w_1.shape() == (c, c0)
            && self.w_2.shape() == (c0, c)
            && self.d_skip.len() == c;
        if !ok {
            return Err(shape_err("SsmParams", format!("inconsistent shapes for C={c}, d={d}, C0={c0}")));
        }
        validate_a_diag(&self.a_diag)
    }

    /// `B`, `C` and `Δ` for every token of `x`.
    pub fn select(&self, x: &Matrix<T>) -> Result<Selection<T>> {
        if x.cols() != self.channels() {
            return Err(shape_err(
                "selective_ssm",
                format!("input has {} channels, params expect {}", x.cols(), self.channels()),
            ));
        }
        Ok(Selection {
            b: matmul(x, &self.w_b)?,
            c: matmul(x, &self.w_c)?,
            delta: input_gate(x, &self.w_1, &self.w_2)?,
        })
    }
}

pub(crate) fn validate_a_diag<T: Scalar>(a: &[T]) -> Result<()> {
    if a.is_empty() {
        return Err(shape_err("SsmParams", "state width must be at least 1"));
    }
    if let Some(bad) = a.iter().find(|&&v| !(v < T::zero())) {
        return Err(Error::Domain(format!("diagonal of A must be strictly negative, found {bad}")));
    }
    Ok(())
}

/// `softplus(x W_1 W_2)`.
pub fn input_gate<T: Scalar>(x: &Matrix<T>, w_1: &Matrix<T>, w_2: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(matmul(&matmul(x, w_1)?, w_2)?.map(softplus))
}

/// `Ã_i` as a `d x C` grid: entry `(r, c)` is `exp(a_r Δ_{i,c})`.
pub fn forget_gate<T: Scalar>(a_diag: &[T], delta_row: &[T]) -> Matrix<T> {
    Matrix::from_fn(a_diag.len(), delta_row.len(), |r, c| (a_diag[r] * delta_row[c]).exp())
}

/// Hidden state of the selective scan.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmHidden<T> {
    /// `d x C`
    pub h: Matrix<T>,
    pub step: usize,
}

impl<T: Scalar> SsmHidden<T> {
    pub fn zeros(state: usize, channels: usize) -> Self {
        Self {
            h: Matrix::zeros(state, channels),
            step: 0,
        }
    }
}

/// Selective scan over all channels at once:
/// `h_i = Ã_i ⊙ h_{i-1} + B_i (Δ_i ⊙ x_i)`, `y_i = C_i h_i + D ⊙ x_i`.
pub fn selective_scan_serial<T: Scalar>(x: &Matrix<T>, p: &SsmParams<T>) -> Result<Matrix<T>> {
    selective_scan_from(x, p, SsmHidden::zeros(p.state_width(), p.channels())).map(|(y, _)| y)
}

/// Continues a selective scan from `hidden`.
pub fn selective_scan_from<T: Scalar>(x: &Matrix<T>, p: &SsmParams<T>, mut hidden: SsmHidden<T>) -> Result<(Matrix<T>, SsmHidden<T>)> {
    let sel = p.select(x)?;
    let (d, c) = (p.state_width(), p.channels());
    if hidden.h.shape() != (d, c) {
        return Err(shape_err("selective_scan", "hidden state does not match params"));
    }
    let mut y = Matrix::zeros(x.rows(), c);
    let mut gated = vec![T::zero(); c];
    for i in 0..x.rows() {
        let (xi, bi, ci, di) = (x.row(i), sel.b.row(i), sel.c.row(i), sel.delta.row(i));
        for ((g, &dv), &xv) in gated.iter_mut().zip(di).zip(xi) {
            *g = dv * xv;
        }
        for r in 0..d {
            let (a, br) = (p.a_diag[r], bi[r]);
            for ((h, &dv), &g) in hidden.h.row_mut(r).iter_mut().zip(di).zip(&gated) {
                *h = (a * dv).exp() * *h + br * g;
            }
        }
        let yi = y.row_mut(i);
        for r in 0..d {
            let cr = ci[r];
            for (o, &h) in yi.iter_mut().zip(hidden.h.row(r)) {
                *o += cr * h;
            }
        }
        for ((o, &dv), &xv) in yi.iter_mut().zip(&p.d_skip).zip(xi) {
            *o += dv * xv;
        }
        hidden.step += 1;
    }
    Ok((y, hidden))
}

/// Matrix-form reference: per channel, `Ā_i = exp(Δ_i A)` is built as a full
/// `d x d` diagonal matrix and `B̄_i = Δ_i B_i`, then the scalar-input
/// selective recurrence is run with dense matrix-vector products.
pub fn selective_scan_matrix_form<T: Scalar>(x: &Matrix<T>, p: &SsmParams<T>) -> Result<Matrix<T>> {
    let sel = p.select(x)?;
    let (d, c) = (p.state_width(), p.channels());
    let mut y = Matrix::zeros(x.rows(), c);
    for ch in 0..c {
        let mut h = Matrix::zeros(d, 1);
        for i in 0..x.rows() {
            let dt = sel.delta.get(i, ch);
            let a_bar = Matrix::from_fn(d, d, |r, s| if r == s { (dt * p.a_diag[r]).exp() } else { T::zero() });
            let b_bar = Matrix::from_fn(d, 1, |r, _| dt * sel.b.get(i, r));
            h = matmul(&a_bar, &h)?.add(&b_bar.scale(x.get(i, ch)))?;
            let out = matmul(&Matrix::row_vector(sel.c.row(i)), &h)?.get(0, 0);
            y.set(i, ch, out + p.d_skip[ch] * x.get(i, ch));
        }
    }
    Ok(y)
}

/// Hadamard-form reference: per channel and per state dimension, the scalar
/// recurrence `h = ã h + b (Δ x)`.
pub fn selective_scan_per_channel<T: Scalar>(x: &Matrix<T>, p: &SsmParams<T>) -> Result<Matrix<T>> {
    let sel = p.select(x)?;
    let (d, c) = (p.state_width(), p.channels());
    let mut y = Matrix::zeros(x.rows(), c);
    for ch in 0..c {
        let mut h = vec![T::zero(); d];
        for i in 0..x.rows() {
            let dt = sel.delta.get(i, ch);
            let xv = x.get(i, ch);
            let mut out = p.d_skip[ch] * xv;
            for (r, hr) in h.iter_mut().enumerate() {
                *hr = (p.a_diag[r] * dt).exp() * *hr + sel.b.get(i, r) * (dt * xv);
                out += sel.c.get(i, r) * *hr;
            }
            y.set(i, ch, out);
        }
    }
    Ok(y)
}

/// Recurrence steps `(Ã_i, B_i^T (Δ_i ⊙ x_i))`, each flattened `d x C`
/// row-major.
pub fn scan_elements<T: Scalar>(x: &Matrix<T>, p: &SsmParams<T>) -> Result<Vec<ScanElement<T>>> {
    let sel = p.select(x)?;
    let (d, c) = (p.state_width(), p.channels());
    (0..x.rows())
        .map(|i| {
            let g = forget_gate(&p.a_diag, sel.delta.row(i)).into_vec();
            let mut u = Vec::with_capacity(d * c);
            for r in 0..d {
                let br = sel.b.get(i, r);
                u.extend(sel.delta.row(i).iter().zip(x.row(i)).map(|(&dv, &xv)| br * (dv * xv)));
            }
            ScanElement::new(g, u)
        })
        .collect()
}

/// Selective SSM evaluated as a chunked scan: per-chunk aggregates are
/// reduced in parallel, combined by an exclusive associative scan, and each
/// chunk is then replayed from its carried-in state. Recurrence steps are
/// generated on the fly, so memory stays `O(N C + chunks d C)`.
pub fn selective_scan_parallel<T: Scalar>(x: &Matrix<T>, p: &SsmParams<T>, chunks: usize) -> Result<Matrix<T>> {
    if chunks == 0 {
        return Err(shape_err("selective_scan_parallel", "chunk count must be at least 1"));
    }
    let sel = p.select(x)?;
    let (n, c, d) = (x.rows(), p.channels(), p.state_width());
    let chunks = chunks.min(n);
    let bounds: Vec<(usize, usize)> = (0..chunks).map(|k| (k * n / chunks, (k + 1) * n / chunks)).collect();
    let fill = |i: usize, g: &mut [T], u: &mut [T]| {
        let (dl, xi) = (sel.delta.row(i), x.row(i));
        for r in 0..d {
            let (ar, br) = (p.a_diag[r], sel.b.get(i, r));
            let (gr, ur) = (&mut g[r * c..(r + 1) * c], &mut u[r * c..(r + 1) * c]);
            for ch in 0..c {
                gr[ch] = (ar * dl[ch]).exp();
                ur[ch] = br * (dl[ch] * xi[ch]);
            }
        }
    };

    let aggregates: Vec<ScanElement<T>> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let mut acc = ScanElement::identity(d * c);
            let (mut g, mut u) = (vec![T::zero(); d * c], vec![T::zero(); d * c]);
            for i in lo..hi {
                fill(i, &mut g, &mut u);
                acc.absorb(&g, &u);
            }
            acc
        })
        .collect();
    let carries = chunk_carries(aggregates)?;

    let pieces: Vec<Matrix<T>> = bounds
        .par_iter()
        .zip(carries)
        .map(|(&(lo, hi), mut h)| {
            let mut y = Matrix::zeros(hi - lo, c);
            let (mut g, mut u) = (vec![T::zero(); d * c], vec![T::zero(); d * c]);
            for i in lo..hi {
                fill(i, &mut g, &mut u);
                for ((hv, &gv), &uv) in h.iter_mut().zip(&g).zip(&u) {
                    *hv = gv * *hv + uv;
                }
                let yi = y.row_mut(i - lo);
                for (r, hr) in h.chunks_exact(c).enumerate() {
                    let cr = sel.c.get(i, r);
                    for (o, &hv) in yi.iter_mut().zip(hr) {
                        *o += cr * hv;
                    }
                }
                for ((o, &dv), &xv) in yi.iter_mut().zip(&p.d_skip).zip(x.row(i)) {
                    *o += dv * xv;
                }
            }
            y
        })
        .collect();
    Matrix::vstack(&pieces)
}

/// Forget-gate diagnostics for one layer.
#[derive(Clone, Debug, Serialize)]
pub struct ForgetGateStats {
    /// Mean of `Ã_i` over its `d x C` entries, per token.
    pub mean_per_token: Vec<f64>,
    pub mean: f64,
    /// `mean^k` for `k = 0..=16`.
    pub attenuation: Vec<f64>,
}

pub const ATTENUATION_HORIZON: usize = 16;

/// Weight retained by a token `k` steps back under constant gate `a`.
pub fn attenuation_curve(a: f64, horizon: usize) -> Vec<f64> {
    (0..=horizon).map(|k| a.powi(k as i32)).collect()
}

pub fn forget_gate_stats<T: Scalar>(x: &Matrix<T>, p: &SsmParams<T>) -> Result<ForgetGateStats> {
    let sel = p.select(x)?;
    let mean_per_token: Vec<f64> = (0..x.rows())
        .map(|i| {
            let g = forget_gate(&p.a_diag, sel.delta.row(i));
            g.as_slice().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / (g.rows() * g.cols()) as f64
        })
        .collect();
    let mean = mean_per_token.iter().sum::<f64>() / mean_per_token.len().max(1) as f64;
    Ok(ForgetGateStats {
        attenuation: attenuation_curve(mean, ATTENUATION_HORIZON),
        mean_per_token,
        mean,
    })
}
