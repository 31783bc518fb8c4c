//! The three macro designs: Transformer (attention + MLP), Mamba (a single
//! gated branch) and MILA (the gated branch followed by an MLP).

use serde::{Deserialize, Serialize};

use super::layers::{join, Activation, LayerNorm, Linear, Parameterized};
use crate::attention::{Kernel, DENOMINATOR_FLOOR};
use crate::error::{Error, Result};
use crate::numerics::{hadamard, Matrix, Rng, Scalar};
use crate::posenc::{depthwise_conv2d, DepthwiseKernel, Grid2D, PosEncKind, PosEncSpec, Rope};
use crate::ssm::{default_low_rank, init_a_diag};
use crate::unified::{mix, BlockDesign, MixerConfig, MixerDims, Scope, UnifiedParams, ValuePath};

/// Width of the depthwise convolution inside the gated branch.
pub const BRANCH_CONV_KERNEL: usize = 3;

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_expansion() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub design: BlockDesign,
    /// Channels `C`.
    pub dim: usize,
    pub heads: usize,
    /// Query/key width per head.
    pub head_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    /// Inner width multiplier `E` of the gated branch.
    #[serde(default = "default_expansion")]
    pub expansion: f64,
    #[serde(default)]
    pub posenc: Vec<PosEncSpec>,
    /// Activation of the gated branch; the MLP always uses GELU.
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub kernel: Kernel,
}

impl BlockSpec {
    /// MILA block with CPE, LePE and RoPE and `d = C / H`.
    pub fn mila(dim: usize, heads: usize) -> Self {
        Self {
            design: BlockDesign::MilaBlock,
            dim,
            heads,
            head_dim: dim / heads.max(1),
            mlp_ratio: 4.0,
            expansion: 1.0,
            posenc: vec![
                PosEncSpec::new(PosEncKind::Cpe),
                PosEncSpec::new(PosEncKind::Lepe),
                PosEncSpec::new(PosEncKind::Rope),
            ],
            activation: Activation::Silu,
            kernel: Kernel::EluPlusOne,
        }
    }

    /// Pre-norm linear attention block without positional encoding.
    pub fn transformer(dim: usize, heads: usize) -> Self {
        Self {
            design: BlockDesign::TransformerBlock,
            posenc: Vec::new(),
            ..Self::mila(dim, heads)
        }
    }

    /// Mamba-style gated block with expansion `E`.
    pub fn mamba(dim: usize, heads: usize, expansion: f64) -> Self {
        Self {
            design: BlockDesign::MambaBlock,
            expansion,
            posenc: Vec::new(),
            ..Self::mila(dim, heads)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("block widths and head count must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} channels do not split into {} heads", self.dim, self.heads)));
        }
        if !(self.mlp_ratio >= 1.0) {
            return Err(Error::Config(format!("mlp ratio must be at least 1, got {}", self.mlp_ratio)));
        }
        if self.design != BlockDesign::TransformerBlock && self.expansion != 1.0 && self.expansion != 2.0 {
            return Err(Error::Config(format!("expansion must be 1 or 2, got {}", self.expansion)));
        }
        if !self.inner_dim().is_multiple_of(self.heads) {
            return Err(Error::Config("inner width does not split across heads".into()));
        }
        for p in &self.posenc {
            p.validate()?;
        }
        Ok(())
    }

    /// Width the mixer runs at: `E * C` for the gated designs, `C` otherwise.
    pub fn inner_dim(&self) -> usize {
        match self.design {
            BlockDesign::TransformerBlock => self.dim,
            _ => (self.expansion * self.dim as f64).round() as usize,
        }
    }

    pub fn qk_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn mlp_dim(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn has_mlp(&self) -> bool {
        self.design != BlockDesign::MambaBlock
    }

    pub fn posenc_of(&self, kind: PosEncKind) -> Option<&PosEncSpec> {
        self.posenc.iter().find(|p| p.kind == kind)
    }

    pub fn mixer_dims(&self) -> MixerDims {
        let inner = self.inner_dim();
        MixerDims {
            channels: inner,
            qk_width: self.qk_width(),
            low_rank: default_low_rank(inner),
        }
    }

    /// The mixer each design uses by default: global normalised linear
    /// attention for Transformer and MILA (projected values only in the
    /// Transformer), a selective SSM for Mamba.
    pub fn default_mixer(&self) -> MixerConfig {
        let dims = self.mixer_dims();
        match self.design {
            BlockDesign::TransformerBlock => MixerConfig {
                scope: Scope::Global,
                ..MixerConfig::linear_attention(dims, self.heads)
            },
            BlockDesign::MambaBlock => MixerConfig {
                heads: self.heads,
                ..MixerConfig::selective_ssm(dims)
            },
            BlockDesign::MilaBlock => MixerConfig::mila(dims, self.heads),
        }
    }

    fn check_mixer(&self, mixer: &MixerConfig) -> Result<()> {
        mixer.validate()?;
        if mixer.block_design != self.design {
            return Err(Error::Config(format!(
                "mixer configured for {:?} but block is {:?}",
                mixer.block_design, self.design
            )));
        }
        if mixer.dims != self.mixer_dims() || mixer.heads != self.heads {
            return Err(Error::Config("mixer dims/heads do not match the block spec".into()));
        }
        Ok(())
    }
}

/// Multi-layer perceptron sub-block with its own pre-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    fn random(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            fc1: Linear::random(dim, hidden, true, rng),
            fc2: Linear::random(hidden, dim, true, rng),
        }
    }

    /// `fc2(gelu(fc1(norm(x))))`, without the residual.
    pub fn branch(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let h = self.fc1.forward(&self.norm.forward(x)?)?;
        self.fc2.forward(&Activation::Gelu.apply_matrix(&h))
    }
}

impl<T: Scalar> Parameterized for Mlp<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

/// A block's weights. Which optional parts exist depends on the design,
/// the positional encodings and the mixer toggles.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub spec: BlockSpec,
    pub mixer: MixerConfig,
    pub cpe: Option<DepthwiseKernel<T>>,
    pub norm: LayerNorm<T>,
    /// `C -> E*C`; gated designs only.
    pub in_proj: Option<Linear<T>>,
    /// Depthwise convolution on the projected branch; gated designs only.
    pub dwconv: Option<DepthwiseKernel<T>>,
    /// `C -> E*C`; gated designs only.
    pub gate_proj: Option<Linear<T>>,
    pub attn: UnifiedParams<T>,
    pub lepe: Option<DepthwiseKernel<T>>,
    /// Norm on the gated product before the output projection (Mamba only).
    pub inner_norm: Option<LayerNorm<T>>,
    /// `E*C -> C`
    pub out_proj: Linear<T>,
    pub mlp: Option<Mlp<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn random(spec: &BlockSpec, mixer: &MixerConfig, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        spec.check_mixer(mixer)?;
        let (c, inner, qk) = (spec.dim, spec.inner_dim(), spec.qk_width());
        let gated = spec.design != BlockDesign::TransformerBlock;
        let dw = |kind: PosEncKind, channels: usize, rng: &mut Rng| -> Result<Option<DepthwiseKernel<T>>> {
            spec.posenc_of(kind)
                .map(|p| DepthwiseKernel::random(channels, p.dwconv_kernel, rng))
                .transpose()
        };
        let cpe = dw(PosEncKind::Cpe, c, rng)?;
        let in_proj = gated.then(|| Linear::random(c, inner, true, rng));
        let dwconv = if gated {
            Some(DepthwiseKernel::random(inner, BRANCH_CONV_KERNEL, rng)?)
        } else {
            None
        };
        let gate_proj = gated.then(|| Linear::random(c, inner, true, rng));
        let needs_delta = mixer.input_gate || mixer.forget_gate;
        let c0 = mixer.dims.low_rank;
        let attn = UnifiedParams {
            w_q: rng.init_weight(inner, qk),
            w_k: rng.init_weight(inner, qk),
            w_v: (mixer.value_path == ValuePath::Projected).then(|| rng.init_weight(inner, inner)),
            kernel: spec.kernel,
            a_diag: mixer.forget_gate.then(|| init_a_diag(qk, rng)),
            w_1: needs_delta.then(|| rng.init_weight(inner, c0)),
            w_2: needs_delta.then(|| rng.init_weight(c0, inner)),
            d_skip: mixer.shortcut.then(|| vec![T::one(); inner]),
        };
        let lepe = dw(PosEncKind::Lepe, inner, rng)?;
        let inner_norm = (spec.design == BlockDesign::MambaBlock).then(|| LayerNorm::new(inner));
        let out_proj = Linear::random(inner, c, true, rng);
        let mlp = spec.has_mlp().then(|| Mlp::random(c, spec.mlp_dim(), rng));
        Ok(Self {
            spec: spec.clone(),
            mixer: *mixer,
            cpe,
            norm: LayerNorm::new(c),
            in_proj,
            dwconv,
            gate_proj,
            attn,
            lepe,
            inner_norm,
            out_proj,
            mlp,
        })
    }

    /// Block with the design's default mixer.
    pub fn random_default(spec: &BlockSpec, rng: &mut Rng) -> Result<Self> {
        Self::random(spec, &spec.default_mixer(), rng)
    }

    pub fn forward(&self, x: &Matrix<T>, grid: Grid2D) -> Result<Matrix<T>> {
        grid.check(x, "block_forward")?;
        if x.cols() != self.spec.dim {
            return Err(crate::error::shape_err(
                "block_forward",
                format!("input has {} channels, block expects {}", x.cols(), self.spec.dim),
            ));
        }
        let x = match &self.cpe {
            Some(k) => x.add(&depthwise_conv2d(x, grid, k)?)?,
            None => x.clone(),
        };
        let u = self.norm.forward(&x)?;
        let act = self.spec.activation;
        let branch = match (&self.in_proj, &self.dwconv) {
            (Some(proj), Some(dw)) => act.apply_matrix(&depthwise_conv2d(&proj.forward(&u)?, grid, dw)?),
            _ => u.clone(),
        };
        let mut y = self.mix(&branch, grid)?;
        if let Some(gate) = &self.gate_proj {
            y = hadamard(&y, &act.apply_matrix(&gate.forward(&u)?))?;
        }
        if let Some(n) = &self.inner_norm {
            y = n.forward(&y)?;
        }
        let mut x = x.add(&self.out_proj.forward(&y)?)?;
        if let Some(mlp) = &self.mlp {
            x.add_assign(&mlp.branch(&x)?)?;
        }
        Ok(x)
    }

    fn mix(&self, a: &Matrix<T>, grid: Grid2D) -> Result<Matrix<T>> {
        let inputs = self.attn.project(a, &self.mixer)?;
        let rope = match self.spec.posenc_of(PosEncKind::Rope) {
            Some(p) => Some(Rope::new(grid, self.mixer.dims.qk_width, self.mixer.heads, p.rope_base)?),
            None => None,
        };
        let (mut y, clamps) = mix(&inputs, self.attn.gates(), a, &self.mixer, rope.as_ref())?;
        if clamps > 0 {
            return Err(Error::Degenerate {
                op: "block_forward",
                events: clamps,
                floor: DENOMINATOR_FLOOR,
            });
        }
        if let Some(k) = &self.lepe {
            y.add_assign(&depthwise_conv2d(&inputs.v, grid, k)?)?;
        }
        Ok(y)
    }
}

impl<T: Scalar> Parameterized for Block<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize)) {
        if let Some(k) = &self.cpe {
            k.visit_params(&join(prefix, "cpe"), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
        if let Some(l) = &self.in_proj {
            l.visit_params(&join(prefix, "in_proj"), f);
        }
        if let Some(k) = &self.dwconv {
            k.visit_params(&join(prefix, "dwconv"), f);
        }
        if let Some(l) = &self.gate_proj {
            l.visit_params(&join(prefix, "gate_proj"), f);
        }
        self.attn.visit_params(&join(prefix, "attn"), f);
        if let Some(k) = &self.lepe {
            k.visit_params(&join(prefix, "lepe"), f);
        }
        if let Some(n) = &self.inner_norm {
            n.visit_params(&join(prefix, "inner_norm"), f);
        }
        self.out_proj.visit_params(&join(prefix, "out_proj"), f);
        if let Some(m) = &self.mlp {
            m.visit_params(&join(prefix, "mlp"), f);
        }
    }
}

/// Free-function form of [`Block::forward`].
pub fn block_forward<T: Scalar>(block: &Block<T>, x: &Matrix<T>, grid: Grid2D) -> Result<Matrix<T>> {
    block.forward(x, grid)
}
