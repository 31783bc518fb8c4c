//! Softmax attention, global linear attention, causal linear attention in
//! its masked-quadratic and recurrent forms, and the multi-head wrapper.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, elu_plus_one, matmul, relu_plus_eps, ops, Matrix, Rng, Scalar};

/// Offset added by [`Kernel::ReluPlusEps`] so keys stay strictly positive.
pub const RELU_EPS: f64 = 1e-6;

/// Magnitude below which a normalising denominator is clamped.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Feature map applied to queries and keys of linear attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    Identity,
    ReluPlusEps,
    #[default]
    EluPlusOne,
}

impl Kernel {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Kernel::Identity => x,
            Kernel::ReluPlusEps => relu_plus_eps(x, T::lit(RELU_EPS)),
            Kernel::EluPlusOne => elu_plus_one(x),
        }
    }

    pub fn apply_matrix<T: Scalar>(self, m: &Matrix<T>) -> Matrix<T> {
        match self {
            Kernel::Identity => m.clone(),
            _ => m.map(|v| self.apply(v)),
        }
    }

    /// Whether every output is strictly positive.
    pub fn is_positive(self) -> bool {
        !matches!(self, Kernel::Identity)
    }
}

/// Projection weights and head layout of an attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T> {
    /// `C x d`
    pub w_q: Matrix<T>,
    /// `C x d`
    pub w_k: Matrix<T>,
    /// `C x C`
    pub w_v: Matrix<T>,
    pub heads: usize,
    pub kernel: Kernel,
}

impl<T: Scalar> AttnParams<T> {
    pub fn new(w_q: Matrix<T>, w_k: Matrix<T>, w_v: Matrix<T>, heads: usize, kernel: Kernel) -> Result<Self> {
        let p = Self {
            w_q,
            w_k,
            w_v,
            heads,
            kernel,
        };
        p.validate()?;
        Ok(p)
    }

    /// Random weights with the default uniform fan-in initialisation.
    pub fn random(channels: usize, qk_width: usize, heads: usize, kernel: Kernel, rng: &mut Rng) -> Result<Self> {
        Self::new(
            rng.init_weight(channels, qk_width),
            rng.init_weight(channels, qk_width),
            rng.init_weight(channels, channels),
            heads,
            kernel,
        )
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn qk_width(&self) -> usize {
        self.w_q.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.w_q.rows();
        let d = self.w_q.cols();
        if self.w_k.shape() != (c, d) {
            return Err(shape_err("AttnParams", format!("w_k is {:?}, expected {c}x{d}", self.w_k.shape())));
        }
        if self.w_v.shape() != (c, c) {
            return Err(shape_err("AttnParams", format!("w_v is {:?}, expected {c}x{c}", self.w_v.shape())));
        }
        check_heads(c, d, self.heads)
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.channels() {
            return Err(shape_err(
                "attention",
                format!("input has {} channels, params expect {}", x.cols(), self.channels()),
            ));
        }
        Ok(())
    }

    /// Raw (pre-kernel) queries and keys plus values.
    pub fn project(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
        self.check_input(x)?;
        Ok((matmul(x, &self.w_q)?, matmul(x, &self.w_k)?, matmul(x, &self.w_v)?))
    }
}

pub(crate) fn check_heads(channels: usize, qk_width: usize, heads: usize) -> Result<()> {
    if heads == 0 {
        return Err(Error::Config("head count must be at least 1".into()));
    }
    if !channels.is_multiple_of(heads) || !qk_width.is_multiple_of(heads) {
        return Err(shape_err(
            "heads",
            format!("{heads} heads do not divide channels {channels} and query/key width {qk_width}"),
        ));
    }
    Ok(())
}

/// Running sums of the recurrent form.
///
/// With several heads, `s` is block diagonal: head `h` owns rows
/// `h*d/H..(h+1)*d/H` and columns `h*C/H..(h+1)*C/H`; `z` is split by rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    /// `d x C`, the running sum of `K_j^T V_j`.
    pub s: Matrix<T>,
    /// `d x 1`, the running sum of `K_j^T`.
    pub z: Matrix<T>,
    /// Number of tokens absorbed so far.
    pub step: usize,
}

impl<T: Scalar> RecurrentState<T> {
    pub fn zeros(qk_width: usize, channels: usize) -> Self {
        Self {
            s: Matrix::zeros(qk_width, channels),
            z: Matrix::zeros(qk_width, 1),
            step: 0,
        }
    }
}

/// Per-head slices of projected queries, keys and values.
pub struct HeadView<'a, T> {
    pub head: usize,
    pub q: &'a Matrix<T>,
    pub k: &'a Matrix<T>,
    pub v: &'a Matrix<T>,
}

/// Splits the projected `q`, `k` (columns of width `d/H`) and `v` (width
/// `C/H`) into `heads` contiguous groups, runs `inner` per group and
/// concatenates the outputs along channels.
pub fn split_heads<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    mut inner: impl FnMut(HeadView<'_, T>) -> Result<Matrix<T>>,
) -> Result<Matrix<T>> {
    check_heads(v.cols(), q.cols(), heads)?;
    if heads == 1 {
        return inner(HeadView { head: 0, q, k, v });
    }
    let dh = q.cols() / heads;
    let ch = v.cols() / heads;
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for h in 0..heads {
        let (qh, kh, vh) = (q.column_block(h * dh, dh), k.column_block(h * dh, dh), v.column_block(h * ch, ch));
        let y = inner(HeadView {
            head: h,
            q: &qh,
            k: &kh,
            v: &vh,
        })?;
        if y.shape() != (v.rows(), ch) {
            return Err(shape_err("multi_head", format!("head {h} returned {:?}", y.shape())));
        }
        out.set_column_block(h * ch, &y);
    }
    Ok(out)
}

/// Projects `x` with `p` and applies `inner` to each head group. `inner`
/// receives raw (pre-kernel) queries and keys.
pub fn multi_head<T: Scalar>(
    x: &Matrix<T>,
    p: &AttnParams<T>,
    inner: impl FnMut(HeadView<'_, T>) -> Result<Matrix<T>>,
) -> Result<Matrix<T>> {
    let (q, k, v) = p.project(x)?;
    split_heads(&q, &k, &v, p.heads, inner)
}

#[inline]
pub(crate) fn guard_denominator<T: Scalar>(den: T, clamps: &mut usize) -> T {
    let floor = T::lit(DENOMINATOR_FLOOR);
    if den.abs() < floor {
        *clamps += 1;
        if den < T::zero() {
            -floor
        } else {
            floor
        }
    } else {
        den
    }
}

fn strict<T>(op: &'static str, (y, clamps): (T, usize)) -> Result<T> {
    if clamps > 0 {
        return Err(Error::Degenerate {
            op,
            events: clamps,
            floor: DENOMINATOR_FLOOR,
        });
    }
    Ok(y)
}

/// Single-head softmax attention on already projected `q`, `k`, `v`.
/// Scores are computed one query row at a time, so memory stays `O(N)`.
pub fn softmax_core<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Matrix<T> {
    let n = q.rows();
    let scale = T::one() / T::from_usize(q.cols()).unwrap().sqrt();
    let mut out = Matrix::zeros(n, v.cols());
    let mut scores = vec![T::zero(); k.rows()];
    for i in 0..n {
        let qi = q.row(i);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qi, k.row(j)) * scale;
        }
        ops::softmax_in_place(&mut scores);
        let yi = out.row_mut(i);
        for (j, &w) in scores.iter().enumerate() {
            for (o, &vj) in yi.iter_mut().zip(v.row(j)) {
                *o += w * vj;
            }
        }
    }
    out
}

/// Global linear attention in reordered form: `Q_i (K^T V) / Q_i (sum K^T)`.
/// `q` and `k` must already carry the kernel feature map.
pub fn linear_parallel_core<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, clamps: &mut usize) -> Result<Matrix<T>> {
    let kv = ops::matmul_tn(k, v)?;
    let mut ksum = vec![T::zero(); k.cols()];
    for j in 0..k.rows() {
        for (s, &kj) in ksum.iter_mut().zip(k.row(j)) {
            *s += kj;
        }
    }
    let mut out = matmul(q, &kv)?;
    for i in 0..q.rows() {
        let den = guard_denominator(dot(q.row(i), &ksum), clamps);
        for o in out.row_mut(i) {
            *o /= den;
        }
    }
    Ok(out)
}

/// Causal linear attention as a masked quadratic product:
/// `y_i = sum_{j<=i} (Q_i K_j^T) V_j / sum_{j<=i} Q_i K_j^T`.
pub fn linear_causal_core<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, clamps: &mut usize) -> Matrix<T> {
    let n = q.rows();
    let mut out = Matrix::zeros(n, v.cols());
    for i in 0..n {
        let qi = q.row(i);
        let mut den = T::zero();
        let yi = out.row_mut(i);
        for j in 0..=i {
            let w = dot(qi, k.row(j));
            den += w;
            for (o, &vj) in yi.iter_mut().zip(v.row(j)) {
                *o += w * vj;
            }
        }
        let den = guard_denominator(den, clamps);
        for o in yi.iter_mut() {
            *o /= den;
        }
    }
    out
}

fn featurize<T: Scalar>(p: &AttnParams<T>, h: &HeadView<'_, T>) -> (Matrix<T>, Matrix<T>) {
    (p.kernel.apply_matrix(h.q), p.kernel.apply_matrix(h.k))
}

fn require_positive_kernel<T: Scalar>(p: &AttnParams<T>, op: &str) -> Result<()> {
    if !p.kernel.is_positive() {
        return Err(Error::Config(format!(
            "{op} normalises by running key sums and needs a positive kernel, got {:?}",
            p.kernel
        )));
    }
    Ok(())
}

/// Softmax (dot-product) attention with `1/sqrt(d)` scaling per head.
pub fn softmax_attention<T: Scalar>(x: &Matrix<T>, p: &AttnParams<T>) -> Result<Matrix<T>> {
    multi_head(x, p, |h| Ok(softmax_core(h.q, h.k, h.v)))
}

/// Global linear attention, computed in the `O(N)` reordered form.
pub fn linear_attention_parallel<T: Scalar>(x: &Matrix<T>, p: &AttnParams<T>) -> Result<Matrix<T>> {
    strict("linear_attention_parallel", linear_attention_parallel_counted(x, p)?)
}

/// Like [`linear_attention_parallel`] but clamps degenerate denominators and
/// returns how many were clamped.
pub fn linear_attention_parallel_counted<T: Scalar>(x: &Matrix<T>, p: &AttnParams<T>) -> Result<(Matrix<T>, usize)> {
    let mut clamps = 0;
    let y = multi_head(x, p, |h| {
        let (q, k) = featurize(p, &h);
        linear_parallel_core(&q, &k, h.v, &mut clamps)
    })?;
    Ok((y, clamps))
}

/// Causal linear attention: token `i` attends to tokens `1..=i`.
pub fn linear_attention_causal<T: Scalar>(x: &Matrix<T>, p: &AttnParams<T>) -> Result<Matrix<T>> {
    strict("linear_attention_causal", linear_attention_causal_counted(x, p)?)
}

pub fn linear_attention_causal_counted<T: Scalar>(x: &Matrix<T>, p: &AttnParams<T>) -> Result<(Matrix<T>, usize)> {
    require_positive_kernel(p, "causal linear attention")?;
    let mut clamps = 0;
    let y = multi_head(x, p, |h| {
        let (q, k) = featurize(p, &h);
        Ok(linear_causal_core(&q, &k, h.v, &mut clamps))
    })?;
    Ok((y, clamps))
}

/// Recurrent linear attention from a zero state. Returns the outputs and the
/// final state, which can be fed to [`linear_attention_recurrent_from`] to
/// continue the sequence.
pub fn linear_attention_recurrent<T: Scalar>(x: &Matrix<T>, p: &AttnParams<T>) -> Result<(Matrix<T>, RecurrentState<T>)> {
    linear_attention_recurrent_from(x, p, RecurrentState::zeros(p.qk_width(), p.channels()))
}

pub fn linear_attention_recurrent_from<T: Scalar>(
    x: &Matrix<T>,
    p: &AttnParams<T>,
    state: RecurrentState<T>,
) -> Result<(Matrix<T>, RecurrentState<T>)> {
    let (y, state, clamps) = recurrent_impl(x, p, state, T::one())?;
    Ok((strict("linear_attention_recurrent", (y, clamps))?, state))
}

/// Recurrent form with the sign of the key-sum update flipped. Only used to
/// check that the verification suite catches a broken recurrence.
#[doc(hidden)]
pub fn linear_attention_recurrent_faulty<T: Scalar>(x: &Matrix<T>, p: &AttnParams<T>) -> Result<Matrix<T>> {
    let (y, _, _) = recurrent_impl(x, p, RecurrentState::zeros(p.qk_width(), p.channels()), -T::one())?;
    Ok(y)
}

fn recurrent_impl<T: Scalar>(
    x: &Matrix<T>,
    p: &AttnParams<T>,
    mut state: RecurrentState<T>,
    z_sign: T,
) -> Result<(Matrix<T>, RecurrentState<T>, usize)> {
    require_positive_kernel(p, "recurrent linear attention")?;
    let (d, c) = (p.qk_width(), p.channels());
    if state.s.shape() != (d, c) || state.z.shape() != (d, 1) {
        return Err(shape_err("linear_attention_recurrent", "state does not match params"));
    }
    let (q, k, v) = p.project(x)?;
    let (q, k) = (p.kernel.apply_matrix(&q), p.kernel.apply_matrix(&k));
    let (dh, ch) = (d / p.heads, c / p.heads);
    let mut out = Matrix::zeros(x.rows(), c);
    let mut clamps = 0;
    for i in 0..x.rows() {
        let (qi, ki, vi) = (q.row(i), k.row(i), v.row(i));
        for h in 0..p.heads {
            let rows = h * dh..(h + 1) * dh;
            let cols = h * ch..(h + 1) * ch;
            for r in rows.clone() {
                let kr = ki[r];
                for (s, &vc) in state.s.row_mut(r)[cols.clone()].iter_mut().zip(&vi[cols.clone()]) {
                    *s += kr * vc;
                }
                state.z.as_mut_slice()[r] += z_sign * kr;
            }
            let den = rows
                .clone()
                .fold(T::zero(), |acc, r| acc + qi[r] * state.z.as_slice()[r]);
            let den = guard_denominator(den, &mut clamps);
            let yi = &mut out.row_mut(i)[cols.clone()];
            for r in rows {
                let qr = qi[r];
                for (o, &s) in yi.iter_mut().zip(&state.s.row(r)[cols.clone()]) {
                    *o += qr * s;
                }
            }
            for o in yi.iter_mut() {
                *o /= den;
            }
        }
        state.step += 1;
    }
    Ok((out, state, clamps))
}

/// Which attention rule [`attention_weights`] reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightForm {
    Softmax,
    LinearGlobal,
    LinearCausal,
}

/// Explicit `N x N` attention weight matrix of every head (row `i` holds the
/// weights query `i` assigns to each key).
pub fn attention_weights<T: Scalar>(x: &Matrix<T>, p: &AttnParams<T>, form: WeightForm) -> Result<Vec<Matrix<T>>> {
    let (q, k, _) = p.project(x)?;
    let heads = p.heads;
    let dh = p.qk_width() / heads;
    let n = x.rows();
    let mut all = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh) = (q.column_block(h * dh, dh), k.column_block(h * dh, dh));
        let w = match form {
            WeightForm::Softmax => {
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let scores = Matrix::from_fn(n, n, |i, j| dot(qh.row(i), kh.row(j)) * scale);
                ops::softmax_rows(&scores)
            }
            WeightForm::LinearGlobal | WeightForm::LinearCausal => {
                let (qf, kf) = (p.kernel.apply_matrix(&qh), p.kernel.apply_matrix(&kh));
                let causal = form == WeightForm::LinearCausal;
                let mut w = Matrix::from_fn(n, n, |i, j| {
                    if causal && j > i {
                        T::zero()
                    } else {
                        dot(qf.row(i), kf.row(j))
                    }
                });
                for i in 0..n {
                    let sum: T = w.row(i).iter().copied().sum();
                    for v in w.row_mut(i) {
                        *v /= sum;
                    }
                }
                w
            }
        };
        all.push(w);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64, n: usize, c: usize, d: usize, heads: usize) -> (Matrix<f64>, AttnParams<f64>) {
        let mut rng = Rng::new(seed);
        let x = rng.uniform_matrix(n, c, -1.0, 1.0);
        let p = AttnParams::random(c, d, heads, Kernel::EluPlusOne, &mut rng).unwrap();
        (x, p)
    }

    // Direct double loop over the softmax definition.
    fn softmax_oracle(x: &Matrix<f64>, p: &AttnParams<f64>) -> Matrix<f64> {
        let (q, k, v) = p.project(x).unwrap();
        let n = x.rows();
        let d = q.cols() as f64;
        let mut y = Matrix::zeros(n, v.cols());
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..q.cols()).map(|r| q.get(i, r) * k.get(j, r)).sum::<f64>() / d.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..n {
                let w = scores[j].exp() / z;
                for c in 0..v.cols() {
                    y.set(i, c, y.get(i, c) + w * v.get(j, c));
                }
            }
        }
        y
    }

    // Un-reordered middle expression: sum_j (Q_i K_j^T / sum_j Q_i K_j^T) V_j,
    // with an optional causal cut-off computing the prefix sums from scratch.
    fn linear_oracle(x: &Matrix<f64>, p: &AttnParams<f64>, causal: bool) -> Matrix<f64> {
        let (q, k, v) = p.project(x).unwrap();
        let q = p.kernel.apply_matrix(&q);
        let k = p.kernel.apply_matrix(&k);
        let n = x.rows();
        let mut y = Matrix::zeros(n, v.cols());
        for i in 0..n {
            let last = if causal { i + 1 } else { n };
            let sims: Vec<f64> = (0..last)
                .map(|j| (0..q.cols()).map(|r| q.get(i, r) * k.get(j, r)).sum())
                .collect();
            let total: f64 = sims.iter().sum();
            for j in 0..last {
                for c in 0..v.cols() {
                    y.set(i, c, y.get(i, c) + sims[j] / total * v.get(j, c));
                }
            }
        }
        y
    }

    #[test]
    fn softmax_single_token_returns_value() {
        let (x, p) = setup(1, 1, 4, 4, 1);
        let (_, _, v) = p.project(&x).unwrap();
        assert!(softmax_attention(&x, &p).unwrap().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn softmax_equal_tokens_average_values() {
        let mut rng = Rng::new(2);
        let row = rng.uniform_vec::<f64>(4, -1.0, 1.0);
        let x = Matrix::from_rows(&vec![row; 5]);
        let p = AttnParams::random(4, 4, 1, Kernel::EluPlusOne, &mut rng).unwrap();
        let (_, _, v) = p.project(&x).unwrap();
        let y = softmax_attention(&x, &p).unwrap();
        for i in 0..5 {
            for c in 0..4 {
                assert!((y.get(i, c) - v.get(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_matches_double_loop() {
        let (x, p) = setup(3, 8, 4, 4, 1);
        assert!(softmax_attention(&x, &p).unwrap().max_abs_diff(&softmax_oracle(&x, &p)) < 1e-10);
    }

    #[test]
    fn parallel_single_token_and_uniform_keys() {
        let (x, p) = setup(4, 1, 4, 4, 1);
        let (_, _, v) = p.project(&x).unwrap();
        assert!(linear_attention_parallel(&x, &p).unwrap().max_abs_diff(&v) < 1e-14);

        // Zero key weights: every key equals phi(0) = 1, so weights are uniform.
        let (x, mut p) = setup(5, 6, 4, 4, 1);
        p.w_k = Matrix::zeros(4, 4);
        let (_, _, v) = p.project(&x).unwrap();
        let y = linear_attention_parallel(&x, &p).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..6).map(|j| v.get(j, c)).sum::<f64>() / 6.0;
            for i in 0..6 {
                assert!((y.get(i, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn parallel_matches_unreordered_oracle() {
        let (x, p) = setup(6, 16, 8, 4, 1);
        let y = linear_attention_parallel(&x, &p).unwrap();
        assert!(y.max_rel_diff(&linear_oracle(&x, &p, false)) < 1e-10);
    }

    #[test]
    fn causal_properties() {
        let (x, p) = setup(7, 12, 6, 4, 1);
        let y = linear_attention_causal(&x, &p).unwrap();
        let (_, _, v) = p.project(&x).unwrap();
        assert!((0..6).all(|c| (y.get(0, c) - v.get(0, c)).abs() < 1e-14));
        let g = linear_attention_parallel(&x, &p).unwrap();
        assert!((0..6).all(|c| (y.get(11, c) - g.get(11, c)).abs() < 1e-12));
        assert!(y.max_abs_diff(&linear_oracle(&x, &p, true)) < 1e-10);
    }

    #[test]
    fn recurrent_matches_causal_and_streams() {
        let (x, p) = setup(8, 10, 8, 4, 2);
        let causal = linear_attention_causal(&x, &p).unwrap();
        let (rec, state) = linear_attention_recurrent(&x, &p).unwrap();
        assert!(rec.max_abs_diff(&causal) < 1e-12);
        assert_eq!(state.step, 10);

        let (a, mid) = linear_attention_recurrent(&x.row_block(0, 4), &p).unwrap();
        let (b, end) = linear_attention_recurrent_from(&x.row_block(4, 6), &p, mid).unwrap();
        let joined = Matrix::vstack(&[a, b]).unwrap();
        assert!(joined.max_abs_diff(&rec) < 1e-14);
        assert!(end.s.max_abs_diff(&state.s) < 1e-14);
    }

    #[test]
    fn recurrent_first_step_state() {
        let (x, p) = setup(9, 1, 4, 3, 1);
        let (_, state) = linear_attention_recurrent(&x, &p).unwrap();
        let (_, k, v) = p.project(&x).unwrap();
        let k = p.kernel.apply_matrix(&k);
        let expect = ops::outer(k.row(0), v.row(0));
        assert!(state.s.max_abs_diff(&expect) < 1e-15);
        assert_eq!(state.z.as_slice(), k.row(0));
    }

    #[test]
    fn identity_kernel_rejected_in_causal_modes() {
        let (x, mut p) = setup(10, 4, 4, 4, 1);
        p.kernel = Kernel::Identity;
        assert!(matches!(linear_attention_causal(&x, &p), Err(Error::Config(_))));
        assert!(linear_attention_recurrent(&x, &p).is_err());
    }

    #[test]
    fn degenerate_denominator_is_reported() {
        let mut rng = Rng::new(11);
        let x = rng.uniform_matrix::<f64>(4, 2, -1.0, 1.0);
        let p = AttnParams::new(Matrix::zeros(2, 2), Matrix::zeros(2, 2), Matrix::identity(2), 1, Kernel::Identity).unwrap();
        assert!(matches!(linear_attention_parallel(&x, &p), Err(Error::Degenerate { .. })));
        let (y, clamps) = linear_attention_parallel_counted(&x, &p).unwrap();
        assert_eq!(clamps, 4);
        assert!(y.is_finite());
    }

    #[test]
    fn head_errors() {
        let mut rng = Rng::new(12);
        assert!(AttnParams::<f64>::random(6, 4, 4, Kernel::EluPlusOne, &mut rng).is_err());
        assert!(AttnParams::<f64>::random(6, 6, 0, Kernel::EluPlusOne, &mut rng).is_err());
        let (x, p) = setup(13, 3, 4, 4, 1);
        assert!(linear_attention_parallel(&x.column_block(0, 3), &p).is_err());
    }

    #[test]
    fn one_head_wrapper_is_the_inner_mixer() {
        let (x, p) = setup(14, 6, 4, 4, 1);
        let (q, k, v) = p.project(&x).unwrap();
        let direct = softmax_core(&q, &k, &v);
        assert_eq!(softmax_attention(&x, &p).unwrap(), direct);
    }

    #[test]
    fn two_heads_with_block_diagonal_weights_split_cleanly() {
        let mut rng = Rng::new(15);
        let x = rng.uniform_matrix::<f64>(7, 8, -1.0, 1.0);
        let halves: Vec<AttnParams<f64>> =
            (0..2).map(|_| AttnParams::random(4, 2, 1, Kernel::EluPlusOne, &mut rng).unwrap()).collect();
        let block = |f: fn(&AttnParams<f64>) -> &Matrix<f64>, cols: usize| {
            let mut m = Matrix::zeros(8, 2 * cols);
            for (h, hp) in halves.iter().enumerate() {
                let w = f(hp);
                for i in 0..4 {
                    for j in 0..cols {
                        m.set(h * 4 + i, h * cols + j, w.get(i, j));
                    }
                }
            }
            m
        };
        let joint = AttnParams::new(block(|p| &p.w_q, 2), block(|p| &p.w_k, 2), block(|p| &p.w_v, 4), 2, Kernel::EluPlusOne).unwrap();
        let y = linear_attention_causal(&x, &joint).unwrap();
        for (h, hp) in halves.iter().enumerate() {
            let yh = linear_attention_causal(&x.column_block(h * 4, 4), hp).unwrap();
            assert!(y.column_block(h * 4, 4).max_abs_diff(&yh) < 1e-13);
        }
    }

    #[test]
    fn head_permutation_round_trip() {
        let (x, p) = setup(16, 5, 8, 4, 2);
        let y = linear_attention_parallel(&x, &p).unwrap();
        // Swap the two heads' query, key and value columns.
        let swap_cols = |m: &Matrix<f64>, w: usize| {
            let mut s = Matrix::zeros(m.rows(), m.cols());
            s.set_column_block(0, &m.column_block(w, w));
            s.set_column_block(w, &m.column_block(0, w));
            s
        };
        let swapped = AttnParams::new(swap_cols(&p.w_q, 2), swap_cols(&p.w_k, 2), swap_cols(&p.w_v, 4), 2, p.kernel).unwrap();
        let ys = linear_attention_parallel(&x, &swapped).unwrap();
        assert!(swap_cols(&ys, 4).max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn reconstructed_weights_are_convex() {
        let (x, p) = setup(17, 9, 8, 4, 2);
        for form in [WeightForm::Softmax, WeightForm::LinearGlobal, WeightForm::LinearCausal] {
            for w in attention_weights(&x, &p, form).unwrap() {
                for i in 0..9 {
                    let s: f64 = w.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-10);
                    assert!(w.row(i).iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn prefix_swap_leaves_later_outputs_unchanged() {
        let (x, p) = setup(18, 8, 4, 4, 1);
        let mut swapped = x.clone();
        swapped.row_mut(0).copy_from_slice(x.row(1));
        swapped.row_mut(1).copy_from_slice(x.row(0));
        let a = linear_attention_causal(&x, &p).unwrap();
        let b = linear_attention_causal(&swapped, &p).unwrap();
        assert!(a.row_block(2, 6).max_abs_diff(&b.row_block(2, 6)) < 1e-12);
    }
}
