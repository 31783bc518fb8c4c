//! Parameter and FLOP accounting.
//!
//! FLOPs are multiply-accumulates: one MAC counts as one FLOP. Norms,
//! activations, gating products, pooling and rotary rotations are
//! elementwise and not counted.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::Serialize;

use super::block::{BlockSpec, BRANCH_CONV_KERNEL};
use super::model::{check_resolution, ModelSpec, Reference, IMAGE_CHANNELS};
use crate::error::Result;
use crate::posenc::PosEncKind;
use crate::unified::{BlockDesign, MixerConfig, ValuePath};

pub const COST_SCHEMA_VERSION: u32 = 1;
pub const FLOP_CONVENTION: &str = "FLOPs count multiply-accumulates (1 MAC = 1 FLOP)";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopTerms {
    /// Input and output projections of the mixer branch (the value
    /// projection counts here in the Transformer design).
    pub in_out_proj: u64,
    pub qk_proj: u64,
    /// Gate branch projection plus the low-rank `Δ` projection when a gate
    /// is enabled.
    pub gate_proj: u64,
    /// `K^T V` and `Q S` products.
    pub linear_attention: u64,
    /// Depthwise convolution inside the gated branch.
    pub dwconv: u64,
    pub mlp: u64,
    /// Convolutional position encodings (CPE, LePE).
    pub posenc: u64,
    pub stem: u64,
    pub downsample: u64,
    pub head: u64,
}

impl FlopTerms {
    pub fn named(&self) -> [(&'static str, u64); 10] {
        [
            ("in_out_proj", self.in_out_proj),
            ("qk_proj", self.qk_proj),
            ("gate_proj", self.gate_proj),
            ("linear_attention", self.linear_attention),
            ("dwconv", self.dwconv),
            ("mlp", self.mlp),
            ("posenc", self.posenc),
            ("stem", self.stem),
            ("downsample", self.downsample),
            ("head", self.head),
        ]
    }

    pub fn total(&self) -> u64 {
        self.named().iter().map(|(_, v)| v).sum()
    }

    pub fn times(&self, k: u64) -> Self {
        let mut out = Self::default();
        for _ in 0..k {
            out += *self;
        }
        out
    }
}

impl Add for FlopTerms {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            in_out_proj: self.in_out_proj + o.in_out_proj,
            qk_proj: self.qk_proj + o.qk_proj,
            gate_proj: self.gate_proj + o.gate_proj,
            linear_attention: self.linear_attention + o.linear_attention,
            dwconv: self.dwconv + o.dwconv,
            mlp: self.mlp + o.mlp,
            posenc: self.posenc + o.posenc,
            stem: self.stem + o.stem,
            downsample: self.downsample + o.downsample,
            head: self.head + o.head,
        }
    }
}

impl AddAssign for FlopTerms {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Closed form for one MILA block: `13NC² + 2NCd + k²NC`.
pub fn mila_block_closed_form(n: u64, c: u64, d: u64, k: u64) -> u64 {
    13 * n * c * c + 2 * n * c * d + k * k * n * c
}

/// Closed form for one linear attention Transformer block:
/// `4NC² + 2NCd + 8NC²`.
pub fn transformer_block_closed_form(n: u64, c: u64, d: u64) -> u64 {
    4 * n * c * c + 2 * n * c * d + 8 * n * c * c
}

fn posenc_kernel(spec: &BlockSpec, kind: PosEncKind) -> Option<u64> {
    spec.posenc_of(kind).map(|p| p.dwconv_kernel as u64)
}

/// Itemised FLOPs of one block over `tokens` tokens.
pub fn block_flops(spec: &BlockSpec, mixer: &MixerConfig, tokens: usize) -> FlopTerms {
    let n = tokens as u64;
    let c = spec.dim as u64;
    let inner = spec.inner_dim() as u64;
    let qk = spec.qk_width() as u64;
    let head_dim = qk / mixer.heads as u64;
    let k = BRANCH_CONV_KERNEL as u64;
    let mut t = FlopTerms {
        qk_proj: 2 * n * inner * qk,
        linear_attention: 2 * n * head_dim * inner,
        ..FlopTerms::default()
    };
    if mixer.input_gate || mixer.forget_gate {
        t.gate_proj += 2 * n * inner * mixer.dims.low_rank as u64;
    }
    if mixer.value_path == ValuePath::Projected {
        t.in_out_proj += n * inner * inner;
    }
    match spec.design {
        BlockDesign::TransformerBlock => t.in_out_proj += n * inner * c,
        BlockDesign::MambaBlock | BlockDesign::MilaBlock => {
            t.in_out_proj += 2 * n * c * inner;
            t.gate_proj += n * c * inner;
            t.dwconv = k * k * n * inner;
        }
    }
    if spec.has_mlp() {
        t.mlp = 2 * n * c * spec.mlp_dim() as u64;
    }
    if let Some(kc) = posenc_kernel(spec, PosEncKind::Cpe) {
        t.posenc += kc * kc * n * c;
    }
    if let Some(kl) = posenc_kernel(spec, PosEncKind::Lepe) {
        t.posenc += kl * kl * n * inner;
    }
    t
}

/// Parameters one block allocates; mirrors [`super::Block::random`].
pub fn block_params(spec: &BlockSpec, mixer: &MixerConfig) -> u64 {
    let c = spec.dim as u64;
    let inner = spec.inner_dim() as u64;
    let qk = spec.qk_width() as u64;
    let k = BRANCH_CONV_KERNEL as u64;
    let gated = spec.design != BlockDesign::TransformerBlock;
    let mut p = 2 * c; // norm
    if let Some(kc) = posenc_kernel(spec, PosEncKind::Cpe) {
        p += kc * kc * c;
    }
    if gated {
        p += 2 * (c * inner + inner) + k * k * inner;
    }
    p += 2 * inner * qk;
    if mixer.value_path == ValuePath::Projected {
        p += inner * inner;
    }
    if mixer.forget_gate {
        p += qk;
    }
    if mixer.input_gate || mixer.forget_gate {
        p += 2 * inner * mixer.dims.low_rank as u64;
    }
    if mixer.shortcut {
        p += inner;
    }
    if let Some(kl) = posenc_kernel(spec, PosEncKind::Lepe) {
        p += kl * kl * inner;
    }
    if spec.design == BlockDesign::MambaBlock {
        p += 2 * inner;
    }
    p += inner * c + c;
    if spec.has_mlp() {
        let m = spec.mlp_dim() as u64;
        p += 2 * c + c * m + m + m * c + c;
    }
    p
}

fn conv_macs(out_tokens: u64, k: u64, c_in: u64, c_out: u64) -> u64 {
    out_tokens * k * k * c_in * c_out
}

fn conv_params(k: u64, c_in: u64, c_out: u64) -> u64 {
    k * k * c_in * c_out + c_out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
    pub dim: usize,
    pub depth: usize,
    /// Blocks plus the downsampling layer entering the stage.
    pub params: u64,
    pub flops: FlopTerms,
    pub flops_total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub schema_version: u32,
    pub model: String,
    pub resolution: usize,
    pub convention: &'static str,
    pub stem_params: u64,
    /// Final norm plus classifier.
    pub head_params: u64,
    pub stages: Vec<StageCost>,
    /// Sum of stem, stage and head FLOPs, by term.
    pub terms: FlopTerms,
    pub total_params: u64,
    pub total_flops: u64,
}

/// Deviation of a report from published figures.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Residual {
    pub reference: Reference,
    /// `(counted - reference) / reference`
    pub params_rel: f64,
    pub flops_rel: f64,
    pub flops_gap: i64,
    /// Each term's share of the counted FLOPs.
    pub shares: Vec<(String, f64)>,
}

/// Counts parameters and FLOPs of `spec` at a square `resolution`.
pub fn count_costs(spec: &ModelSpec, resolution: usize) -> Result<CostReport> {
    spec.validate()?;
    check_resolution(resolution)?;
    let grids = spec.stage_grids(resolution)?;
    let c0 = spec.stem_out as u64;
    let img = IMAGE_CHANNELS as u64;
    let half = (resolution / 2) as u64;
    let mut terms = FlopTerms {
        stem: conv_macs(half * half, 3, img, c0) + conv_macs(grids[0].tokens() as u64, 3, c0, c0),
        ..FlopTerms::default()
    };
    let mut stem_params = conv_params(3, img, c0) + conv_params(3, c0, c0) + 2 * c0;
    if spec.has_ape() {
        let side = (spec.resolution / spec.patch) as u64;
        stem_params += side * side * c0;
    }
    let mut stages = Vec::with_capacity(4);
    for (i, g) in grids.iter().enumerate() {
        let bs = spec.block_spec(i);
        let mixer = bs.default_mixer();
        let depth = spec.stages[i].depth as u64;
        let mut flops = block_flops(&bs, &mixer, g.tokens()).times(depth);
        let mut params = block_params(&bs, &mixer) * depth;
        if i > 0 {
            let (cin, cout) = (spec.stages[i - 1].dim as u64, bs.dim as u64);
            flops.downsample = conv_macs(g.tokens() as u64, 3, cin, cout);
            params += conv_params(3, cin, cout) + 2 * cout;
        }
        terms += flops;
        stages.push(StageCost {
            index: i,
            height: g.height,
            width: g.width,
            tokens: g.tokens(),
            dim: bs.dim,
            depth: spec.stages[i].depth,
            params,
            flops,
            flops_total: flops.total(),
        });
    }
    let last = spec.stages[3].dim as u64;
    let classes = spec.num_classes as u64;
    terms.head = last * classes;
    let head_params = 2 * last + last * classes + classes;
    let total_params = stem_params + head_params + stages.iter().map(|s| s.params).sum::<u64>();
    Ok(CostReport {
        schema_version: COST_SCHEMA_VERSION,
        model: spec.name.clone(),
        resolution,
        convention: FLOP_CONVENTION,
        stem_params,
        head_params,
        stages,
        terms,
        total_params,
        total_flops: terms.total(),
    })
}

impl CostReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn residual(&self, reference: Reference) -> Residual {
        let rel = |got: u64, want: u64| (got as f64 - want as f64) / want as f64;
        let total = self.total_flops as f64;
        Residual {
            reference,
            params_rel: rel(self.total_params, reference.params),
            flops_rel: rel(self.total_flops, reference.flops),
            flops_gap: self.total_flops as i64 - reference.flops as i64,
            shares: self.terms.named().iter().map(|(k, v)| (k.to_string(), *v as f64 / total)).collect(),
        }
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} @ {}x{}", self.model, self.resolution, self.resolution);
        let _ = writeln!(s, "# {}", self.convention);
        let _ = writeln!(s, "{:<8} {:>9} {:>6} {:>6} {:>14} {:>16}", "stage", "grid", "dim", "depth", "params", "flops");
        let _ = writeln!(s, "{:<8} {:>9} {:>6} {:>6} {:>14} {:>16}", "stem", "-", self.stages[0].dim, "-", self.stem_params, self.terms.stem);
        for st in &self.stages {
            let grid = format!("{}x{}", st.height, st.width);
            let _ = writeln!(s, "{:<8} {:>9} {:>6} {:>6} {:>14} {:>16}", st.index + 1, grid, st.dim, st.depth, st.params, st.flops_total);
        }
        let _ = writeln!(s, "{:<8} {:>9} {:>6} {:>6} {:>14} {:>16}", "head", "-", "-", "-", self.head_params, self.terms.head);
        let _ = writeln!(s, "{:<8} {:>9} {:>6} {:>6} {:>14} {:>16}", "total", "", "", "", self.total_params, self.total_flops);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<18} {:>16} {:>7}", "term", "flops", "share");
        for (name, v) in self.terms.named() {
            let share = 100.0 * v as f64 / self.total_flops as f64;
            let _ = writeln!(s, "{:<18} {:>16} {:>6.2}%", name, v, share);
        }
        s
    }
}
