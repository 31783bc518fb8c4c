//! One gated recurrence covering linear attention and the selective SSM.
//!
//! Per head and token:
//!
//! ```text
//! S_i = Gf_i ⊙ S_{i-1} + K_i^T (Gin_i ⊙ V_i)
//! Z_i = Gf_i ⊙ Z_{i-1} + K_i^T                  (normalization only)
//! y_i = Q_i S_i / (Q_i Z_i or 1) + (D ⊙ x_i or 0)
//! ```
//!
//! `Gf_i = exp(a ⊗ Δ_i)` when the forget gate is on and all-ones otherwise;
//! `Gin_i = Δ_i = softplus(x_i W_1 W_2)` when the input gate is on. Queries
//! play the role of the SSM's `C_i`, keys of `B_i^T`, and values of `x_i`.
//! With the forget gate on, `Z` is decayed by the same `d x C` gate so that
//! normalised weights remain a convex combination per channel.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{check_heads, guard_denominator, AttnParams, Kernel, DENOMINATOR_FLOOR};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, matmul, Matrix, Rng, Scalar};
use crate::posenc::Rope;
use crate::ssm::{default_low_rank, init_a_diag, input_gate, validate_a_diag, SsmParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockDesign {
    TransformerBlock,
    MambaBlock,
    MilaBlock,
}

/// Where the values come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValuePath {
    /// `V_i = x_i`, as in the selective SSM.
    Raw,
    /// `V_i = x_i W_V`, as in attention.
    Projected,
}

/// Receptive field of each token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Token `i` sees tokens `1..=i` (recurrent evaluation).
    Causal,
    /// Every token sees the whole sequence (parallel evaluation). Not
    /// available with a forget gate.
    Global,
}

/// Widths of the mixer. The sequence length comes from the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerDims {
    /// Channels `C`.
    pub channels: usize,
    /// Total query/key (state) width `d`, split evenly across heads.
    pub qk_width: usize,
    /// Low-rank width `C0` of the `Δ` projection.
    pub low_rank: usize,
}

impl MixerDims {
    pub fn new(channels: usize, qk_width: usize) -> Self {
        Self {
            channels,
            qk_width,
            low_rank: default_low_rank(channels),
        }
    }
}

/// The six distinctions between linear attention and the selective SSM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub input_gate: bool,
    pub forget_gate: bool,
    pub shortcut: bool,
    pub normalization: bool,
    pub heads: usize,
    pub block_design: BlockDesign,
    pub value_path: ValuePath,
    pub scope: Scope,
    pub dims: MixerDims,
}

pub const PRESET_NAMES: [&str; 3] = ["linear-attention", "selective-ssm", "mila"];

impl MixerConfig {
    /// Causal multi-head linear attention with projected values.
    pub fn linear_attention(dims: MixerDims, heads: usize) -> Self {
        Self {
            input_gate: false,
            forget_gate: false,
            shortcut: false,
            normalization: true,
            heads,
            block_design: BlockDesign::TransformerBlock,
            value_path: ValuePath::Projected,
            scope: Scope::Causal,
            dims,
        }
    }

    /// Single-head selective SSM: both gates and the shortcut, no
    /// normalization, raw values.
    pub fn selective_ssm(dims: MixerDims) -> Self {
        Self {
            input_gate: true,
            forget_gate: true,
            shortcut: true,
            normalization: false,
            heads: 1,
            block_design: BlockDesign::MambaBlock,
            value_path: ValuePath::Raw,
            scope: Scope::Causal,
            dims,
        }
    }

    /// Global multi-head linear attention on raw values inside the MILA block.
    pub fn mila(dims: MixerDims, heads: usize) -> Self {
        Self {
            input_gate: false,
            forget_gate: false,
            shortcut: false,
            normalization: true,
            heads,
            block_design: BlockDesign::MilaBlock,
            value_path: ValuePath::Raw,
            scope: Scope::Global,
            dims,
        }
    }

    /// Looks up a preset by its CLI name. `heads` is ignored by
    /// `selective-ssm`, which is single-head by definition.
    pub fn preset(name: &str, dims: MixerDims, heads: usize) -> Result<Self> {
        let cfg = match name {
            "linear-attention" => Self::linear_attention(dims, heads),
            "selective-ssm" => Self::selective_ssm(dims),
            "mila" => Self::mila(dims, heads),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}`, expected one of {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.dims.channels, self.dims.qk_width, self.heads)?;
        if self.dims.low_rank == 0 {
            return Err(Error::Config("low-rank width must be at least 1".into()));
        }
        if self.forget_gate && self.scope == Scope::Global {
            return Err(Error::Config("a forget gate requires causal (recurrent) evaluation".into()));
        }
        Ok(())
    }

    fn needs_delta(&self) -> bool {
        self.input_gate || self.forget_gate
    }
}

/// Parameters of the unified mixer. Optional fields are only required by the
/// toggles that use them.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedParams<T> {
    /// `C x d`; queries (the SSM's `W_C`).
    pub w_q: Matrix<T>,
    /// `C x d`; keys (the SSM's `W_B`).
    pub w_k: Matrix<T>,
    /// `C x C`; used when the value path is [`ValuePath::Projected`].
    pub w_v: Option<Matrix<T>>,
    pub kernel: Kernel,
    /// Length `d`, strictly negative; forget gate.
    pub a_diag: Option<Vec<T>>,
    /// `C x C0`; input/forget gate projection.
    pub w_1: Option<Matrix<T>>,
    /// `C0 x C`
    pub w_2: Option<Matrix<T>>,
    /// Length `C`; shortcut.
    pub d_skip: Option<Vec<T>>,
}

impl<T: Scalar> UnifiedParams<T> {
    /// Every parameter allocated, so any toggle combination can run.
    pub fn random(dims: MixerDims, kernel: Kernel, rng: &mut Rng) -> Self {
        let (c, d, c0) = (dims.channels, dims.qk_width, dims.low_rank);
        Self {
            w_q: rng.init_weight(c, d),
            w_k: rng.init_weight(c, d),
            w_v: Some(rng.init_weight(c, c)),
            kernel,
            a_diag: Some(init_a_diag(d, rng)),
            w_1: Some(rng.init_weight(c, c0)),
            w_2: Some(rng.init_weight(c0, c)),
            d_skip: Some(vec![T::one(); c]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn qk_width(&self) -> usize {
        self.w_q.cols()
    }

    pub fn validate(&self, cfg: &MixerConfig) -> Result<()> {
        cfg.validate()?;
        let (c, d) = (self.channels(), self.qk_width());
        if (c, d) != (cfg.dims.channels, cfg.dims.qk_width) || self.w_k.shape() != (c, d) {
            return Err(shape_err("UnifiedParams", format!("query/key weights do not match dims {:?}", cfg.dims)));
        }
        if cfg.value_path == ValuePath::Projected && self.w_v.as_ref().map(Matrix::shape) != Some((c, c)) {
            return Err(Error::Config("projected value path needs a C x C value weight".into()));
        }
        if cfg.needs_delta() {
            match (&self.w_1, &self.w_2) {
                (Some(w1), Some(w2)) if w1.rows() == c && w2.cols() == c && w1.cols() == w2.rows() => {}
                _ => return Err(Error::Config("gates need W_1 (C x C0) and W_2 (C0 x C)".into())),
            }
        }
        if cfg.forget_gate {
            let a = self.a_diag.as_deref().ok_or_else(|| Error::Config("forget gate needs the diagonal of A".into()))?;
            if a.len() != d {
                return Err(shape_err("UnifiedParams", format!("A has {} entries, state width is {d}", a.len())));
            }
            validate_a_diag(a)?;
        }
        if cfg.shortcut && self.d_skip.as_ref().map(Vec::len) != Some(c) {
            return Err(Error::Config("shortcut needs a length-C vector D".into()));
        }
        if cfg.normalization && !self.kernel.is_positive() {
            return Err(Error::Config("normalization needs a positive key kernel".into()));
        }
        Ok(())
    }

    /// Kernelised queries/keys, values and (when a gate needs it) `Δ`.
    pub fn project(&self, x: &Matrix<T>, cfg: &MixerConfig) -> Result<MixerInputs<T>> {
        self.validate(cfg)?;
        if x.cols() != self.channels() {
            return Err(shape_err(
                "unified_forward",
                format!("input has {} channels, params expect {}", x.cols(), self.channels()),
            ));
        }
        let v = match cfg.value_path {
            ValuePath::Raw => x.clone(),
            ValuePath::Projected => matmul(x, self.w_v.as_ref().expect("validated"))?,
        };
        let delta = if cfg.needs_delta() {
            Some(input_gate(x, self.w_1.as_ref().expect("validated"), self.w_2.as_ref().expect("validated"))?)
        } else {
            None
        };
        Ok(MixerInputs {
            q: self.kernel.apply_matrix(&matmul(x, &self.w_q)?),
            k: self.kernel.apply_matrix(&matmul(x, &self.w_k)?),
            v,
            delta,
        })
    }
}

/// Per-token mixer operands after projection.
#[derive(Clone, Debug)]
pub struct MixerInputs<T> {
    /// `N x d`, kernel applied.
    pub q: Matrix<T>,
    /// `N x d`, kernel applied.
    pub k: Matrix<T>,
    /// `N x C`
    pub v: Matrix<T>,
    /// `N x C`, present when the input or forget gate is on.
    pub delta: Option<Matrix<T>>,
}

/// Gate and shortcut parameters consumed by [`mix`].
#[derive(Clone, Copy, Debug)]
pub struct GateParams<'a, T> {
    pub a_diag: Option<&'a [T]>,
    pub d_skip: Option<&'a [T]>,
}

impl<T: Scalar> UnifiedParams<T> {
    pub fn gates(&self) -> GateParams<'_, T> {
        GateParams {
            a_diag: self.a_diag.as_deref(),
            d_skip: self.d_skip.as_deref(),
        }
    }
}

/// Runs the unified recurrence on projected operands.
///
/// `shortcut_input` is the `x` of `D ⊙ x_i`. When `rope` is given, queries
/// and keys in the numerator are rotated while the normaliser keeps the
/// unrotated (nonnegative) features. Returns the output and the number of
/// clamped denominators.
pub fn mix<T: Scalar>(
    inputs: &MixerInputs<T>,
    gates: GateParams<'_, T>,
    shortcut_input: &Matrix<T>,
    cfg: &MixerConfig,
    rope: Option<&Rope<T>>,
) -> Result<(Matrix<T>, usize)> {
    cfg.validate()?;
    let MixerInputs { q, k, v, delta } = inputs;
    let (n, c, d) = (v.rows(), v.cols(), q.cols());
    if q.rows() != n || k.shape() != (n, d) || shortcut_input.shape() != (n, c) {
        return Err(shape_err("mix", "queries, keys, values and shortcut disagree on shape"));
    }
    check_heads(c, d, cfg.heads)?;
    if cfg.needs_delta() && delta.as_ref().map(Matrix::shape) != Some((n, c)) {
        return Err(Error::Config("gates need Δ for every token".into()));
    }
    let a_diag = if cfg.forget_gate {
        Some(gates.a_diag.filter(|a| a.len() == d).ok_or_else(|| Error::Config("forget gate needs A of length d".into()))?)
    } else {
        None
    };
    let d_skip = if cfg.shortcut {
        Some(gates.d_skip.filter(|s| s.len() == c).ok_or_else(|| Error::Config("shortcut needs D of length C".into()))?)
    } else {
        None
    };
    let rotated;
    let (q_num, k_num) = match rope {
        Some(r) => {
            rotated = (r.rotate(q)?, r.rotate(k)?);
            (&rotated.0, &rotated.1)
        }
        None => (q, k),
    };

    // Gated values Gin ⊙ V.
    let gv = match (cfg.input_gate, delta) {
        (true, Some(dl)) => v.zip_map(dl, "input gate", |a, b| a * b)?,
        _ => v.clone(),
    };

    let mut out = Matrix::zeros(n, c);
    let mut clamps = 0;
    let (dh, ch) = (d / cfg.heads, c / cfg.heads);
    for h in 0..cfg.heads {
        let rows = h * dh..(h + 1) * dh;
        let cols = h * ch..(h + 1) * ch;
        let head = HeadOperands {
            q_num,
            k_num,
            q_den: q,
            k_den: k,
            gv: &gv,
            delta: delta.as_ref(),
            a_diag,
            rows,
            cols,
        };
        match cfg.scope {
            Scope::Causal => head.run_causal(cfg, &mut out, &mut clamps),
            Scope::Global => head.run_global(cfg, &mut out, &mut clamps),
        }
    }
    if let Some(ds) = d_skip {
        for i in 0..n {
            for ((o, &dv), &xv) in out.row_mut(i).iter_mut().zip(ds).zip(shortcut_input.row(i)) {
                *o += dv * xv;
            }
        }
    }
    Ok((out, clamps))
}

struct HeadOperands<'a, T> {
    q_num: &'a Matrix<T>,
    k_num: &'a Matrix<T>,
    q_den: &'a Matrix<T>,
    k_den: &'a Matrix<T>,
    gv: &'a Matrix<T>,
    delta: Option<&'a Matrix<T>>,
    a_diag: Option<&'a [T]>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
}

impl<T: Scalar> HeadOperands<'_, T> {
    fn run_causal(&self, cfg: &MixerConfig, out: &mut Matrix<T>, clamps: &mut usize) {
        let (dh, ch) = (self.rows.len(), self.cols.len());
        let c0 = self.cols.start;
        let mut s = Matrix::<T>::zeros(dh, ch);
        // `Z` is d x 1 without a forget gate and d x C with one.
        let z_cols = if cfg.forget_gate { ch } else { 1 };
        let mut z = Matrix::<T>::zeros(dh, z_cols);
        let mut num = vec![T::zero(); ch];
        let mut den = vec![T::zero(); z_cols];
        for i in 0..self.gv.rows() {
            let kn = &self.k_num.row(i)[self.rows.clone()];
            let kd = &self.k_den.row(i)[self.rows.clone()];
            let gv = &self.gv.row(i)[self.cols.clone()];
            match self.a_diag {
                Some(a) => {
                    let dl = &self.delta.expect("validated").row(i)[self.cols.clone()];
                    for (lr, r) in self.rows.clone().enumerate() {
                        let ar = a[r];
                        let kr = kn[lr];
                        for ((sv, &dv), &g) in s.row_mut(lr).iter_mut().zip(dl).zip(gv) {
                            *sv = (ar * dv).exp() * *sv + kr * g;
                        }
                        if cfg.normalization {
                            let kz = kd[lr];
                            for (zv, &dv) in z.row_mut(lr).iter_mut().zip(dl) {
                                *zv = (ar * dv).exp() * *zv + kz;
                            }
                        }
                    }
                }
                None => {
                    for lr in 0..dh {
                        let kr = kn[lr];
                        for (sv, &g) in s.row_mut(lr).iter_mut().zip(gv) {
                            *sv += kr * g;
                        }
                        if cfg.normalization {
                            z.row_mut(lr)[0] += kd[lr];
                        }
                    }
                }
            }
            let qn = &self.q_num.row(i)[self.rows.clone()];
            num.iter_mut().for_each(|v| *v = T::zero());
            for (lr, &qr) in qn.iter().enumerate() {
                for (o, &sv) in num.iter_mut().zip(s.row(lr)) {
                    *o += qr * sv;
                }
            }
            let yi = &mut out.row_mut(i)[self.cols.clone()];
            if cfg.normalization {
                let qd = &self.q_den.row(i)[self.rows.clone()];
                den.iter_mut().for_each(|v| *v = T::zero());
                for (lr, &qr) in qd.iter().enumerate() {
                    for (o, &zv) in den.iter_mut().zip(z.row(lr)) {
                        *o += qr * zv;
                    }
                }
                for dv in den.iter_mut() {
                    *dv = guard_denominator(*dv, clamps);
                }
                for (cc, (o, &nv)) in yi.iter_mut().zip(&num).enumerate() {
                    *o = nv / den[if z_cols == 1 { 0 } else { cc }];
                }
            } else {
                yi.copy_from_slice(&num);
            }
        }
        let _ = c0;
    }

    fn run_global(&self, cfg: &MixerConfig, out: &mut Matrix<T>, clamps: &mut usize) {
        let (dh, ch) = (self.rows.len(), self.cols.len());
        let mut s = Matrix::<T>::zeros(dh, ch);
        let mut z = vec![T::zero(); dh];
        for j in 0..self.gv.rows() {
            let kn = &self.k_num.row(j)[self.rows.clone()];
            let kd = &self.k_den.row(j)[self.rows.clone()];
            let gv = &self.gv.row(j)[self.cols.clone()];
            for lr in 0..dh {
                let kr = kn[lr];
                for (sv, &g) in s.row_mut(lr).iter_mut().zip(gv) {
                    *sv += kr * g;
                }
                z[lr] += kd[lr];
            }
        }
        for i in 0..self.gv.rows() {
            let qn = &self.q_num.row(i)[self.rows.clone()];
            let yi = &mut out.row_mut(i)[self.cols.clone()];
            for (lr, &qr) in qn.iter().enumerate() {
                for (o, &sv) in yi.iter_mut().zip(s.row(lr)) {
                    *o += qr * sv;
                }
            }
            if cfg.normalization {
                let den = guard_denominator(dot(&self.q_den.row(i)[self.rows.clone()], &z), clamps);
                for o in yi.iter_mut() {
                    *o /= den;
                }
            }
        }
    }
}

/// Unified mixer on raw tokens `x`. Fails if any normaliser degenerates.
pub fn unified_forward<T: Scalar>(x: &Matrix<T>, p: &UnifiedParams<T>, cfg: &MixerConfig) -> Result<Matrix<T>> {
    let (y, clamps) = unified_forward_counted(x, p, cfg, None)?;
    if clamps > 0 {
        return Err(Error::Degenerate {
            op: "unified_forward",
            events: clamps,
            floor: DENOMINATOR_FLOOR,
        });
    }
    Ok(y)
}

/// Unified mixer with optional rotary embedding; clamps degenerate
/// normalisers and reports how many were clamped.
pub fn unified_forward_counted<T: Scalar>(
    x: &Matrix<T>,
    p: &UnifiedParams<T>,
    cfg: &MixerConfig,
    rope: Option<&Rope<T>>,
) -> Result<(Matrix<T>, usize)> {
    let inputs = p.project(x, cfg)?;
    mix(&inputs, p.gates(), x, cfg, rope)
}

/// Maps a selective SSM layer onto the unified mixer (`C_i → Q_i`,
/// `B_i → K_i^T`, `x_i → V_i`) with the selective-SSM preset.
pub fn from_ssm<T: Scalar>(p: &SsmParams<T>) -> (UnifiedParams<T>, MixerConfig) {
    let dims = MixerDims {
        channels: p.channels(),
        qk_width: p.state_width(),
        low_rank: p.low_rank(),
    };
    (
        UnifiedParams {
            w_q: p.w_c.clone(),
            w_k: p.w_b.clone(),
            w_v: None,
            kernel: Kernel::Identity,
            a_diag: Some(p.a_diag.clone()),
            w_1: Some(p.w_1.clone()),
            w_2: Some(p.w_2.clone()),
            d_skip: Some(p.d_skip.clone()),
        },
        MixerConfig::selective_ssm(dims),
    )
}

/// Maps attention weights onto the unified mixer with the causal
/// linear-attention preset.
pub fn from_attention<T: Scalar>(p: &AttnParams<T>) -> (UnifiedParams<T>, MixerConfig) {
    let dims = MixerDims::new(p.channels(), p.qk_width());
    (
        UnifiedParams {
            w_q: p.w_q.clone(),
            w_k: p.w_k.clone(),
            w_v: Some(p.w_v.clone()),
            kernel: p.kernel,
            a_diag: None,
            w_1: None,
            w_2: None,
            d_skip: None,
        },
        MixerConfig::linear_attention(dims, p.heads),
    )
}

/// Explicit per-channel weights of the normalised causal mixer: entry
/// `(i, j)` of head `h`'s matrix is the weight query `i` gives to the gated
/// value of token `j` in `channel`. Computed from gate products directly.
pub fn normalized_weights<T: Scalar>(x: &Matrix<T>, p: &UnifiedParams<T>, cfg: &MixerConfig, channel: usize) -> Result<Matrix<T>> {
    if !cfg.normalization || cfg.scope != Scope::Causal {
        return Err(Error::Config("weights are defined for the normalised causal mixer".into()));
    }
    let inputs = p.project(x, cfg)?;
    let n = x.rows();
    let (d, c) = (p.qk_width(), p.channels());
    if channel >= c {
        return Err(shape_err("normalized_weights", format!("channel {channel} of {c}")));
    }
    let head = channel / (c / cfg.heads);
    let dh = d / cfg.heads;
    let rows = head * dh..(head + 1) * dh;
    let decay = |t: usize, r: usize| -> T {
        match (cfg.forget_gate, &inputs.delta, &p.a_diag) {
            (true, Some(dl), Some(a)) => (a[r] * dl.get(t, channel)).exp(),
            _ => T::one(),
        }
    };
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = T::zero();
            for r in rows.clone() {
                let mut g = T::one();
                for t in j + 1..=i {
                    g *= decay(t, r);
                }
                acc += inputs.q.get(i, r) * g * inputs.k.get(j, r);
            }
            w.set(i, j, acc);
        }
        let total: T = w.row(i).iter().copied().sum();
        for v in w.row_mut(i) {
            *v /= total;
        }
    }
    Ok(w)
}

/// One of the six distinctions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Toggle {
    InputGate,
    ForgetGate,
    Shortcut,
    Normalization,
    MultiHead,
    BlockDesign,
}

impl Toggle {
    pub const ALL: [Toggle; 6] = [
        Toggle::InputGate,
        Toggle::ForgetGate,
        Toggle::Shortcut,
        Toggle::Normalization,
        Toggle::MultiHead,
        Toggle::BlockDesign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::InputGate => "input-gate",
            Toggle::ForgetGate => "forget-gate",
            Toggle::Shortcut => "shortcut",
            Toggle::Normalization => "normalization",
            Toggle::MultiHead => "multi-head",
            Toggle::BlockDesign => "block-design",
        }
    }

    /// `cfg` with this distinction flipped. Turning the forget gate on also
    /// switches to causal evaluation; flipping multi-head goes from `H`
    /// heads to one, or from one head to two. The block design is a
    /// block-level choice and cannot be flipped on a bare mixer.
    pub fn apply(self, cfg: &MixerConfig) -> Result<MixerConfig> {
        let mut out = *cfg;
        match self {
            Toggle::InputGate => out.input_gate = !cfg.input_gate,
            Toggle::ForgetGate => {
                out.forget_gate = !cfg.forget_gate;
                if out.forget_gate {
                    out.scope = Scope::Causal;
                }
            }
            Toggle::Shortcut => out.shortcut = !cfg.shortcut,
            Toggle::Normalization => out.normalization = !cfg.normalization,
            Toggle::MultiHead => out.heads = if cfg.heads == 1 { 2 } else { 1 },
            Toggle::BlockDesign => {
                return Err(Error::Config(
                    "block design is a block-level toggle; flip BlockSpec::design instead".into(),
                ))
            }
        }
        out.validate()?;
        Ok(out)
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Toggle::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownToggle(s.to_string()))
    }
}

/// Outputs before and after flipping one distinction.
#[derive(Clone, Debug)]
pub struct Ablation<T> {
    pub toggle: Toggle,
    pub before: Matrix<T>,
    pub after: Matrix<T>,
    /// Mean of `|after - before|` over all entries.
    pub mean_abs_delta: f64,
    /// `‖after‖_F / ‖before‖_F`.
    pub norm_ratio: f64,
}

pub fn ablate<T: Scalar>(x: &Matrix<T>, p: &UnifiedParams<T>, base: &MixerConfig, toggle: Toggle) -> Result<Ablation<T>> {
    let flipped = toggle.apply(base)?;
    let before = unified_forward(x, p, base)?;
    let after = unified_forward(x, p, &flipped)?;
    let count = (before.rows() * before.cols()) as f64;
    let mean_abs_delta = before
        .as_slice()
        .iter()
        .zip(after.as_slice())
        .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
        .sum::<f64>()
        / count;
    let norm_ratio = after.frobenius_norm().to_f64_lossy() / before.frobenius_norm().to_f64_lossy();
    Ok(Ablation {
        toggle,
        before,
        after,
        mean_abs_delta,
        norm_ratio,
    })
}
