//! Four-stage hierarchical backbone: stem (4x) → stages joined by 2x
//! downsampling → pooled classifier.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::block::{Block, BlockSpec};
use super::layers::{join, Activation, Conv2d, LayerNorm, Linear, Parameterized};
use crate::attention::Kernel;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Matrix, Rng, Scalar};
use crate::posenc::{Grid2D, PosEncKind, PosEncSpec};
use crate::unified::BlockDesign;

pub const MODEL_SCHEMA_VERSION: u32 = 1;
pub const IMAGE_CHANNELS: usize = 3;
/// Total spatial reduction from input pixels to the last stage.
pub const TOTAL_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
}

/// Design choices shared by every block of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTemplate {
    pub design: BlockDesign,
    pub mlp_ratio: f64,
    pub expansion: f64,
    pub posenc: Vec<PosEncSpec>,
    pub activation: Activation,
    pub kernel: Kernel,
}

impl BlockTemplate {
    pub fn mila() -> Self {
        let b = BlockSpec::mila(64, 1);
        Self {
            design: b.design,
            mlp_ratio: b.mlp_ratio,
            expansion: b.expansion,
            posenc: b.posenc,
            activation: b.activation,
            kernel: b.kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub schema_version: u32,
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub stem_out: usize,
    /// Stem reduction factor.
    pub patch: usize,
    /// Reduction factor between stages.
    pub downsample: usize,
    pub num_classes: usize,
    /// Input resolution; only sizes the absolute position table, if any.
    pub resolution: usize,
    pub block: BlockTemplate,
}

/// Parameter and FLOP figures a model is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub params: u64,
    pub flops: u64,
}

pub const MODEL_NAMES: [&str; 3] = ["mila-t", "mila-s", "mila-b"];

impl ModelSpec {
    fn mila(name: &str, dims: [usize; 4], heads: [usize; 4], depths: [usize; 4]) -> Self {
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            name: name.to_string(),
            stages: (0..4)
                .map(|i| StageSpec {
                    dim: dims[i],
                    heads: heads[i],
                    depth: depths[i],
                })
                .collect(),
            stem_out: dims[0],
            patch: 4,
            downsample: 2,
            num_classes: 1000,
            resolution: 224,
            block: BlockTemplate::mila(),
        }
    }

    pub fn mila_t() -> Self {
        Self::mila("mila-t", [64, 128, 256, 512], [2, 4, 8, 16], [2, 4, 8, 4])
    }

    pub fn mila_s() -> Self {
        Self::mila("mila-s", [64, 128, 256, 512], [2, 4, 8, 16], [3, 6, 21, 6])
    }

    pub fn mila_b() -> Self {
        Self::mila("mila-b", [96, 192, 384, 768], [3, 6, 12, 24], [3, 6, 21, 6])
    }

    /// Accepts `T`/`S`/`B` as well as the full names.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "t" | "mila-t" => Ok(Self::mila_t()),
            "s" | "mila-s" => Ok(Self::mila_s()),
            "b" | "mila-b" => Ok(Self::mila_b()),
            other => Err(Error::Config(format!("unknown model `{other}`, expected T, S or B"))),
        }
    }

    /// Published parameter and FLOP counts (at 224x224) for the presets.
    pub fn reference(&self) -> Option<Reference> {
        let (params, flops) = match self.name.as_str() {
            "mila-t" => (25_000_000, 4_200_000_000),
            "mila-s" => (43_000_000, 7_300_000_000),
            "mila-b" => (96_000_000, 16_200_000_000),
            _ => return None,
        };
        Some(Reference { params, flops })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "model schema version {} is not supported (expected {MODEL_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.stages.len() != 4 {
            return Err(Error::Config(format!("expected 4 stages, got {}", self.stages.len())));
        }
        if self.patch != 4 || self.downsample != 2 {
            return Err(Error::Config("stem must reduce by 4 and stages by 2".into()));
        }
        if self.stages.windows(2).any(|w| w[1].dim <= w[0].dim) {
            return Err(Error::Config("stage widths must strictly increase".into()));
        }
        if self.stages.iter().any(|s| s.depth == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.stem_out != self.stages[0].dim {
            return Err(Error::Config("stem width must equal the first stage width".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        check_resolution(self.resolution)?;
        for i in 0..4 {
            self.block_spec(i).validate()?;
        }
        Ok(())
    }

    /// Block spec of stage `i`, with `d = C / H` per head.
    pub fn block_spec(&self, i: usize) -> BlockSpec {
        let s = self.stages[i];
        let t = &self.block;
        BlockSpec {
            design: t.design,
            dim: s.dim,
            heads: s.heads,
            head_dim: s.dim / s.heads.max(1),
            mlp_ratio: t.mlp_ratio,
            expansion: t.expansion,
            posenc: t.posenc.clone(),
            activation: t.activation,
            kernel: t.kernel,
        }
    }

    pub fn has_ape(&self) -> bool {
        self.block.posenc.iter().any(|p| p.kind == PosEncKind::Ape)
    }

    /// Token grid entering each stage for a square input.
    pub fn stage_grids(&self, resolution: usize) -> Result<Vec<Grid2D>> {
        check_resolution(resolution)?;
        let side = resolution / self.patch;
        (0..4).map(|i| Grid2D::new(side >> i, side >> i)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn check_resolution(resolution: usize) -> Result<()> {
    if resolution == 0 || !resolution.is_multiple_of(TOTAL_STRIDE) {
        return Err(Error::Domain(format!("resolution {resolution} is not a positive multiple of {TOTAL_STRIDE}")));
    }
    Ok(())
}

/// 3x3 stride-2 convolution followed by a norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Downsample<T> {
    pub conv: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> Parameterized for Downsample<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub downsample: Option<Downsample<T>>,
    pub blocks: Vec<Block<T>>,
}

/// Two stride-2 3x3 convolutions (GELU between) and a norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> Parameterized for Stem<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub stem: Stem<T>,
    /// Absolute position table for the first stage, when requested.
    pub ape: Option<Matrix<T>>,
    pub stages: Vec<Stage<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

/// Allocates every weight of `spec` from `rng`.
pub fn build_model<T: Scalar>(spec: &ModelSpec, rng: &mut Rng) -> Result<Model<T>> {
    spec.validate()?;
    let c0 = spec.stem_out;
    let stem = Stem {
        conv1: Conv2d::random(IMAGE_CHANNELS, c0, 3, 2, 1, rng)?,
        conv2: Conv2d::random(c0, c0, 3, 2, 1, rng)?,
        norm: LayerNorm::new(c0),
    };
    let ape = if spec.has_ape() {
        let side = spec.resolution / spec.patch;
        Some(rng.uniform_matrix(side * side, c0, -0.02, 0.02))
    } else {
        None
    };
    let mut stages = Vec::with_capacity(4);
    for i in 0..4 {
        let bs = spec.block_spec(i);
        let downsample = if i == 0 {
            None
        } else {
            Some(Downsample {
                conv: Conv2d::random(spec.stages[i - 1].dim, bs.dim, 3, 2, 1, rng)?,
                norm: LayerNorm::new(bs.dim),
            })
        };
        let blocks = (0..spec.stages[i].depth)
            .map(|_| Block::random_default(&bs, rng))
            .collect::<Result<Vec<_>>>()?;
        stages.push(Stage { downsample, blocks });
    }
    let last = spec.stages[3].dim;
    Ok(Model {
        spec: spec.clone(),
        stem,
        ape,
        stages,
        norm: LayerNorm::new(last),
        head: Linear::random(last, spec.num_classes, true, rng),
    })
}

impl<T: Scalar> Model<T> {
    /// Logits for one `(H*W) x 3` image.
    pub fn forward(&self, image: &Matrix<T>, grid: Grid2D) -> Result<Vec<T>> {
        Ok(self.forward_trace(image, grid)?.0)
    }

    /// Logits plus the token grid each stage ran at.
    pub fn forward_trace(&self, image: &Matrix<T>, grid: Grid2D) -> Result<(Vec<T>, Vec<Grid2D>)> {
        if grid.height != grid.width {
            return Err(Error::Domain("only square inputs are supported".into()));
        }
        check_resolution(grid.height)?;
        if image.cols() != IMAGE_CHANNELS {
            return Err(shape_err("model_forward", format!("image has {} channels", image.cols())));
        }
        let (x, g) = self.stem.conv1.forward(image, grid)?;
        let (x, mut g) = self.stem.conv2.forward(&Activation::Gelu.apply_matrix(&x), g)?;
        let mut x = self.stem.norm.forward(&x)?;
        if let Some(table) = &self.ape {
            if table.rows() != x.rows() {
                return Err(shape_err("model_forward", format!("position table built for {} tokens", table.rows())));
            }
            x.add_assign(table)?;
        }
        let mut grids = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                let (y, ng) = ds.conv.forward(&x, g)?;
                x = ds.norm.forward(&y)?;
                g = ng;
            }
            grids.push(g);
            for b in &stage.blocks {
                x = b.forward(&x, g)?;
            }
        }
        let x = self.norm.forward(&x)?;
        let inv = T::one() / T::from_usize(x.rows()).expect("token count fits");
        let pooled: Vec<T> = (0..x.cols()).map(|c| (0..x.rows()).map(|i| x.get(i, c)).sum::<T>() * inv).collect();
        let logits = self.head.forward(&Matrix::row_vector(&pooled))?;
        Ok((logits.into_vec(), grids))
    }

    /// Independent images in parallel; results in input order.
    pub fn forward_batch(&self, images: &[Matrix<T>], grid: Grid2D) -> Result<Vec<Vec<T>>> {
        images.par_iter().map(|img| self.forward(img, grid)).collect()
    }
}

impl<T: Scalar> Parameterized for Model<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, usize)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        if let Some(t) = &self.ape {
            f(&join(prefix, "ape"), t.rows() * t.cols());
        }
        for (i, s) in self.stages.iter().enumerate() {
            let sp = join(prefix, &format!("stages.{i}"));
            if let Some(ds) = &s.downsample {
                ds.visit_params(&join(&sp, "downsample"), f);
            }
            for (j, b) in s.blocks.iter().enumerate() {
                b.visit_params(&join(&sp, &format!("blocks.{j}")), f);
            }
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
}
