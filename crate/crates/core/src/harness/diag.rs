//! Probes of what each distinction does: forget-gate magnitudes and decay,
//! the effect of normalization on token lengths, and order sensitivity.

use serde::Serialize;

use super::{RunConfig, REPORT_SCHEMA_VERSION};
use crate::attention::Kernel;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::ssm::{attenuation_curve, forget_gate, forget_gate_stats, SsmParams, ATTENUATION_HORIZON};
use crate::unified::{unified_forward, MixerConfig, MixerDims, Scope, UnifiedParams};

/// Input scale of the normalization probe.
pub const DIAG_ALPHA: f64 = 8.0;
/// Seeds of the normalization Monte-Carlo probe.
pub const DIAG_SEEDS: usize = 50;
const DIAG_LAYERS: usize = 4;
const CURVE_GATES: [f64; 3] = [0.2, 0.6, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDiag {
    pub layer: usize,
    pub forget_gate_mean: f64,
    pub forget_gate_min: f64,
    pub forget_gate_max: f64,
    pub input_gate_min: f64,
    /// Std of per-token output L2 norms, normalization on / off.
    pub token_std_norm_on: f64,
    pub token_std_norm_off: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub gate: f64,
    /// `gate^k` for `k = 0..=horizon`.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormDominance {
    pub alpha: f64,
    pub seeds: usize,
    /// Seeds where the unnormalised token-length std exceeds the normalised one.
    pub off_exceeds_on: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PermutationProbe {
    /// Largest change of outputs after the swapped prefix.
    pub forget_off_delta: f64,
    pub forget_on_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagReport {
    pub schema_version: u32,
    pub seed: u64,
    pub preset: String,
    pub n: usize,
    pub layers: Vec<LayerDiag>,
    pub attenuation: Vec<Curve>,
    pub norm_dominance: NormDominance,
    pub permutation: PermutationProbe,
}

/// Standard deviation of the row L2 norms.
pub fn token_length_std(y: &Matrix<f64>) -> f64 {
    let lens: Vec<f64> = (0..y.rows()).map(|i| y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mean = lens.iter().sum::<f64>() / lens.len() as f64;
    (lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / lens.len() as f64).sqrt()
}

fn with_norm(cfg: &MixerConfig, on: bool) -> MixerConfig {
    MixerConfig {
        normalization: on,
        ..*cfg
    }
}

fn with_forget(cfg: &MixerConfig, on: bool) -> MixerConfig {
    MixerConfig {
        forget_gate: on,
        scope: if on { Scope::Causal } else { cfg.scope },
        ..*cfg
    }
}

fn norm_stds(x: &Matrix<f64>, p: &UnifiedParams<f64>, base: &MixerConfig) -> Result<(f64, f64)> {
    let on = token_length_std(&unified_forward(x, p, &with_norm(base, true))?);
    let off = token_length_std(&unified_forward(x, p, &with_norm(base, false))?);
    Ok((on, off))
}

fn swap_first_two(x: &Matrix<f64>) -> Matrix<f64> {
    let mut s = x.clone();
    s.row_mut(0).copy_from_slice(x.row(1));
    s.row_mut(1).copy_from_slice(x.row(0));
    s
}

/// Max change in outputs `2..N` when tokens 0 and 1 are swapped.
pub fn prefix_swap_delta(x: &Matrix<f64>, p: &UnifiedParams<f64>, cfg: &MixerConfig) -> Result<f64> {
    let n = x.rows();
    let a = unified_forward(x, p, cfg)?.row_block(2, n - 2);
    let b = unified_forward(&swap_first_two(x), p, cfg)?.row_block(2, n - 2);
    Ok(a.max_abs_diff(&b))
}

pub fn diag(cfg: &RunConfig) -> Result<DiagReport> {
    cfg.validate()?;
    let preset = cfg.preset.clone().unwrap_or_else(|| "selective-ssm".to_string());
    let s = &cfg.sizes;
    let n = s.n[0];
    if n < 3 {
        return Err(Error::Config("diagnostics need at least 3 tokens".into()));
    }
    let dims = MixerDims::new(s.c, s.d);
    let base = MixerConfig::preset(&preset, dims, s.h)?;
    let root = Rng::new(cfg.seed);

    let mut layers = Vec::with_capacity(DIAG_LAYERS);
    for layer in 0..DIAG_LAYERS {
        let mut rng = root.split(layer as u64);
        let x = rng.uniform_matrix::<f64>(n, s.c, -1.0, 1.0);
        let ssm = SsmParams::random(s.c, s.d, None, &mut rng)?;
        let stats = forget_gate_stats(&x, &ssm)?;
        let sel = ssm.select(&x)?;
        let (mut gmin, mut gmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            for &g in forget_gate(&ssm.a_diag, sel.delta.row(i)).as_slice() {
                gmin = gmin.min(g);
                gmax = gmax.max(g);
            }
        }
        let input_gate_min = sel.delta.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
        let p = UnifiedParams::random(dims, Kernel::EluPlusOne, &mut rng);
        let (on, off) = norm_stds(&x.scale(DIAG_ALPHA), &p, &base)?;
        layers.push(LayerDiag {
            layer,
            forget_gate_mean: stats.mean,
            forget_gate_min: gmin,
            forget_gate_max: gmax,
            input_gate_min,
            token_std_norm_on: on,
            token_std_norm_off: off,
        });
    }

    let mut off_exceeds_on = 0;
    for seed in 0..DIAG_SEEDS {
        let mut rng = root.split(1000 + seed as u64);
        let x = rng.uniform_matrix::<f64>(n, s.c, -DIAG_ALPHA, DIAG_ALPHA);
        let p = UnifiedParams::random(dims, Kernel::EluPlusOne, &mut rng);
        let (on, off) = norm_stds(&x, &p, &base)?;
        if off > on {
            off_exceeds_on += 1;
        }
    }

    let mut rng = root.split(2000);
    let x = rng.uniform_matrix::<f64>(n, s.c, -1.0, 1.0);
    let p = UnifiedParams::random(dims, Kernel::EluPlusOne, &mut rng);
    let permutation = PermutationProbe {
        forget_off_delta: prefix_swap_delta(&x, &p, &with_forget(&base, false))?,
        forget_on_delta: prefix_swap_delta(&x, &p, &with_forget(&base, true))?,
    };

    Ok(DiagReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.seed,
        preset,
        n,
        layers,
        attenuation: CURVE_GATES
            .iter()
            .map(|&g| Curve {
                gate: g,
                values: attenuation_curve(g, ATTENUATION_HORIZON),
            })
            .collect(),
        norm_dominance: NormDominance {
            alpha: DIAG_ALPHA,
            seeds: DIAG_SEEDS,
            off_exceeds_on,
            fraction: off_exceeds_on as f64 / DIAG_SEEDS as f64,
        },
        permutation,
    })
}
