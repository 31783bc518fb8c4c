//! The equivalence suite: every pair of formulations that must agree, run on
//! seeded random instances, with the worst observed error per check.

use rayon::prelude::*;
use serde::Serialize;

use super::{RunConfig, REPORT_SCHEMA_VERSION};
use crate::attention::{
    attention_weights, linear_attention_causal, linear_attention_parallel, linear_attention_recurrent,
    linear_attention_recurrent_faulty, softmax_attention, AttnParams, Kernel, WeightForm,
};
use crate::blocks::{block_flops, build_model, count_costs, mila_block_closed_form, Activation, BlockSpec, BlockTemplate, ModelSpec, Parameterized, StageSpec};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix, Rng};
use crate::posenc::{depthwise_conv2d, DepthwiseKernel, Grid2D, PosEncKind, PosEncSpec, Rope};
use crate::scan::{scan_parallel, scan_serial, ScanElement};
use crate::ssm::{
    discretization_gap, discretize, selective_scan_matrix_form, selective_scan_parallel, selective_scan_per_channel,
    selective_scan_serial, Discretization, SsmParams,
};
use crate::unified::{from_attention, from_ssm, unified_forward, BlockDesign};

/// Fault modes accepted by `inject_fault`.
pub const FAULTS: [&str; 1] = ["z-sign"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub instances: usize,
    /// Worst error over all instances (`null` if the check errored).
    pub max_error: f64,
    pub tolerance: f64,
    pub relative: bool,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub fault: Option<String>,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn failed(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    /// Columns: `name,instances,max_error,tolerance,relative,passed`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,instances,max_error,tolerance,relative,passed\n");
        for c in &self.checks {
            s += &format!("{},{},{:e},{:e},{},{}\n", c.name, c.instances, c.max_error, c.tolerance, c.relative, c.passed);
        }
        s
    }
}

struct Faults {
    z_sign: bool,
}

type Trial = fn(&mut Rng, &Faults) -> Result<f64>;

struct CheckDef {
    name: &'static str,
    tolerance: f64,
    relative: bool,
    /// Caps the instance count for expensive checks.
    max_instances: usize,
    trial: Trial,
}

const CHECKS: &[CheckDef] = &[
    CheckDef { name: "linear-reorder", tolerance: 1e-10, relative: true, max_instances: usize::MAX, trial: linear_reorder },
    CheckDef { name: "softmax-explicit", tolerance: 1e-12, relative: false, max_instances: usize::MAX, trial: softmax_explicit },
    CheckDef { name: "causal-recurrent", tolerance: 1e-12, relative: false, max_instances: usize::MAX, trial: causal_recurrent },
    CheckDef { name: "causal-explicit", tolerance: 1e-12, relative: false, max_instances: usize::MAX, trial: causal_explicit },
    CheckDef { name: "ssm-forms", tolerance: 1e-12, relative: false, max_instances: usize::MAX, trial: ssm_forms },
    CheckDef { name: "unified-linear-preset", tolerance: 1e-12, relative: false, max_instances: usize::MAX, trial: unified_linear },
    CheckDef { name: "unified-ssm-preset", tolerance: 1e-12, relative: false, max_instances: usize::MAX, trial: unified_ssm },
    CheckDef { name: "scan-chunks", tolerance: 1e-12, relative: false, max_instances: usize::MAX, trial: scan_chunks },
    CheckDef { name: "ssm-chunked-scan", tolerance: 1e-12, relative: false, max_instances: usize::MAX, trial: ssm_chunked },
    CheckDef { name: "posenc-dwconv", tolerance: 1e-12, relative: false, max_instances: usize::MAX, trial: posenc_dwconv },
    CheckDef { name: "posenc-rope-relative", tolerance: 1e-12, relative: false, max_instances: usize::MAX, trial: rope_relative },
    CheckDef { name: "discretization-exp", tolerance: 1e-14, relative: true, max_instances: usize::MAX, trial: discretization_exp },
    CheckDef { name: "discretization-gap-decade", tolerance: 2.0, relative: false, max_instances: usize::MAX, trial: gap_decade },
    CheckDef { name: "cost-closed-form", tolerance: 0.0, relative: false, max_instances: usize::MAX, trial: cost_closed_form },
    CheckDef { name: "cost-allocation", tolerance: 0.0, relative: false, max_instances: 12, trial: cost_allocation },
];

/// Runs every check. Checks run concurrently; each draws from its own
/// stream, so the report does not depend on scheduling.
pub fn verify(cfg: &RunConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let faults = Faults {
        z_sign: cfg.inject_fault.as_deref() == Some("z-sign"),
    };
    let root = Rng::new(cfg.seed);
    let checks: Vec<Check> = CHECKS
        .par_iter()
        .enumerate()
        .map(|(i, def)| {
            let mut rng = root.split(i as u64);
            let instances = cfg.instances.min(def.max_instances);
            let mut worst = 0.0f64;
            let mut error = None;
            for _ in 0..instances {
                match (def.trial)(&mut rng, &faults) {
                    Ok(e) if e.is_nan() => {
                        worst = f64::INFINITY;
                        error = Some("NaN error".to_string());
                        break;
                    }
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        worst = f64::INFINITY;
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            Check {
                name: def.name,
                instances,
                max_error: worst,
                tolerance: def.tolerance,
                relative: def.relative,
                passed: error.is_none() && worst <= def.tolerance,
                error,
            }
        })
        .collect();
    Ok(VerifyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.seed,
        fault: cfg.inject_fault.clone(),
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn below(rng: &mut Rng, k: usize) -> usize {
    (rng.next_u64() % k as u64) as usize
}

/// `N ≤ 64`, `C ≤ 32`, `d ≤ 16`, heads dividing both widths.
struct Dims {
    n: usize,
    c: usize,
    d: usize,
    h: usize,
}

fn dims(rng: &mut Rng) -> Dims {
    let h = [1, 2, 4][below(rng, 3)];
    Dims {
        n: 1 + below(rng, 64),
        c: h * (1 + below(rng, 32 / h)),
        d: h * (1 + below(rng, 16 / h)),
        h,
    }
}

fn kernel(rng: &mut Rng) -> Kernel {
    [Kernel::EluPlusOne, Kernel::ReluPlusEps][below(rng, 2)]
}

fn attn_instance(rng: &mut Rng) -> Result<(Matrix<f64>, AttnParams<f64>)> {
    let s = dims(rng);
    let k = kernel(rng);
    let p = AttnParams::random(s.c, s.d, s.h, k, rng)?;
    Ok((rng.uniform_matrix(s.n, s.c, -1.0, 1.0), p))
}

fn ssm_instance(rng: &mut Rng) -> Result<(Matrix<f64>, SsmParams<f64>)> {
    let s = dims(rng);
    let p = SsmParams::random(s.c, s.d, None, rng)?;
    Ok((rng.uniform_matrix(s.n, s.c, -1.0, 1.0), p))
}

/// Per-head `W V` from explicit weight matrices.
fn explicit(x: &Matrix<f64>, p: &AttnParams<f64>, form: WeightForm) -> Result<Matrix<f64>> {
    let (_, _, v) = p.project(x)?;
    let ch = p.channels() / p.heads;
    let mut out = Matrix::zeros(x.rows(), p.channels());
    for (h, w) in attention_weights(x, p, form)?.iter().enumerate() {
        out.set_column_block(h * ch, &matmul(w, &v.column_block(h * ch, ch))?);
    }
    Ok(out)
}

fn linear_reorder(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let (x, p) = attn_instance(rng)?;
    Ok(linear_attention_parallel(&x, &p)?.max_rel_diff(&explicit(&x, &p, WeightForm::LinearGlobal)?))
}

fn softmax_explicit(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let (x, p) = attn_instance(rng)?;
    Ok(softmax_attention(&x, &p)?.max_abs_diff(&explicit(&x, &p, WeightForm::Softmax)?))
}

fn causal_recurrent(rng: &mut Rng, f: &Faults) -> Result<f64> {
    let (x, p) = attn_instance(rng)?;
    let rec = if f.z_sign {
        linear_attention_recurrent_faulty(&x, &p)?
    } else {
        linear_attention_recurrent(&x, &p)?.0
    };
    Ok(rec.max_abs_diff(&linear_attention_causal(&x, &p)?))
}

fn causal_explicit(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let (x, p) = attn_instance(rng)?;
    Ok(linear_attention_causal(&x, &p)?.max_abs_diff(&explicit(&x, &p, WeightForm::LinearCausal)?))
}

fn ssm_forms(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let (x, p) = ssm_instance(rng)?;
    let serial = selective_scan_serial(&x, &p)?;
    let a = selective_scan_matrix_form(&x, &p)?.max_abs_diff(&serial);
    let b = selective_scan_per_channel(&x, &p)?.max_abs_diff(&serial);
    Ok(a.max(b))
}

fn unified_linear(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let (x, p) = attn_instance(rng)?;
    let (u, cfg) = from_attention(&p);
    Ok(unified_forward(&x, &u, &cfg)?.max_abs_diff(&linear_attention_causal(&x, &p)?))
}

fn unified_ssm(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let (x, p) = ssm_instance(rng)?;
    let (u, cfg) = from_ssm(&p);
    Ok(unified_forward(&x, &u, &cfg)?.max_abs_diff(&selective_scan_serial(&x, &p)?))
}

fn scan_chunks(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let s = dims(rng);
    let width = s.c * s.d;
    let elems = (0..s.n)
        .map(|_| ScanElement::<f64>::new(rng.uniform_vec(width, 0.0, 1.0), rng.uniform_vec(width, -1.0, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let serial = scan_serial(&elems)?;
    let mut worst = 0.0f64;
    for chunks in [1, 2, 3, 5, 8, 16, 33, 64] {
        for (a, b) in scan_parallel(&elems, chunks)?.iter().zip(&serial) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(worst)
}

fn ssm_chunked(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let (x, p) = ssm_instance(rng)?;
    let serial = selective_scan_serial(&x, &p)?;
    let chunks = 1 + below(rng, x.rows());
    Ok(selective_scan_parallel(&x, &p, chunks)?.max_abs_diff(&serial))
}

fn posenc_dwconv(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let (h, w, c) = (1 + below(rng, 8), 1 + below(rng, 8), 1 + below(rng, 8));
    let k = [1, 3, 5, 7][below(rng, 4)];
    let grid = Grid2D::new(h, w)?;
    let x = rng.uniform_matrix::<f64>(h * w, c, -1.0, 1.0);
    let kern = DepthwiseKernel::random(c, k, rng)?;
    let y = depthwise_conv2d(&x, grid, &kern)?;
    // Sliding window written against raw row-major offsets.
    let half = (k / 2) as isize;
    let mut worst = 0.0f64;
    for r in 0..h as isize {
        for col in 0..w as isize {
            for ch in 0..c {
                let mut acc = 0.0;
                for i in -half..=half {
                    for j in -half..=half {
                        let (rr, cc) = (r + i, col + j);
                        if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                            let tap = ((i + half) * k as isize + (j + half)) as usize;
                            acc += kern.weights.get(ch, tap) * x.get((rr * w as isize + cc) as usize, ch);
                        }
                    }
                }
                worst = worst.max((acc - y.get((r * w as isize + col) as usize, ch)).abs());
            }
        }
    }
    Ok(worst)
}

/// `<R(p) q, R(p') k>` depends only on `p - p'`.
fn rope_relative(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let (side, heads) = (6, 1 + below(rng, 2));
    let width = heads * 4 * (1 + below(rng, 3));
    let grid = Grid2D::new(side, side)?;
    let rope = Rope::<f64>::new(grid, width, heads, 10_000.0)?;
    let q = rng.uniform_vec::<f64>(width, -1.0, 1.0);
    let k = rng.uniform_vec::<f64>(width, -1.0, 1.0);
    let fill = |v: &[f64]| Matrix::from_fn(side * side, width, |_, c| v[c]);
    let (rq, rk) = (rope.rotate(&fill(&q))?, rope.rotate(&fill(&k))?);
    let (dr, dc) = (below(rng, 3), below(rng, 3));
    let at = |r: usize, c: usize| grid.index(r, c);
    let score = |a: usize, b: usize| -> f64 {
        let hw = width / heads;
        (0..heads).map(|h| (h * hw..(h + 1) * hw).map(|i| rq.get(a, i) * rk.get(b, i)).sum::<f64>()).sum()
    };
    let base = score(at(dr, dc), at(0, 0));
    let mut worst = 0.0f64;
    for r in 0..side - dr {
        for c in 0..side - dc {
            worst = worst.max((score(at(r + dr, c + dc), at(r, c)) - base).abs());
        }
    }
    Ok(worst)
}

/// `exp` by its power series on `|z|`, inverted for negative `z`.
fn exp_series(z: f64) -> f64 {
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    for k in 1..60 {
        term *= z.abs() / k as f64;
        sum += term;
    }
    if z < 0.0 {
        1.0 / sum
    } else {
        sum
    }
}

fn discretization_exp(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let d = 1 + below(rng, 16);
    let a: Vec<f64> = (0..d).map(|_| -rng.uniform(-4.0, 1.0).exp()).collect();
    let b = rng.uniform_vec::<f64>(d, -1.0, 1.0);
    let delta = rng.uniform(-7.0, 0.0).exp();
    let pair = discretize(&a, &b, delta, Discretization::ExactZoh)?;
    Ok(pair
        .a_bar
        .iter()
        .zip(&a)
        .map(|(&got, &av)| {
            let want = exp_series(delta * av);
            (got - want).abs() / want
        })
        .fold(0.0, f64::max))
}

fn gap_decade(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let a = -rng.uniform(0.25, 4.0);
    let b = rng.uniform(0.5, 2.0);
    let (g1, g2, g3) = (discretization_gap(a, b, 0.1)?, discretization_gap(a, b, 0.01)?, discretization_gap(a, b, 0.001)?);
    Ok(((g1 / g2) - 10.0).abs().max(((g2 / g3) - 10.0).abs()))
}

fn cost_closed_form(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let h = 1 + below(rng, 8);
    let c = h * (1 + below(rng, 64));
    let n = 1 + below(rng, 4096);
    let mut spec = BlockSpec::mila(c, h);
    spec.posenc.clear();
    let got = block_flops(&spec, &spec.default_mixer(), n).total();
    let want = mila_block_closed_form(n as u64, c as u64, (c / h) as u64, 3);
    let fixed = mila_block_closed_form(196, 256, 32, 3);
    Ok((got as f64 - want as f64).abs() + (fixed as f64 - 170_648_576.0).abs())
}

fn cost_allocation(rng: &mut Rng, _: &Faults) -> Result<f64> {
    let m = 1 + below(rng, 2);
    let design = [BlockDesign::MilaBlock, BlockDesign::TransformerBlock, BlockDesign::MambaBlock][below(rng, 3)];
    let mut posenc = vec![PosEncSpec::new(PosEncKind::Cpe), PosEncSpec::new(PosEncKind::Lepe)];
    if below(rng, 2) == 1 {
        posenc.push(PosEncSpec::new(PosEncKind::Ape));
    }
    let spec = ModelSpec {
        name: "random".into(),
        stages: (0..4)
            .map(|i| StageSpec {
                dim: 8 * m * (i + 1),
                heads: 2,
                depth: 1 + below(rng, 2),
            })
            .collect(),
        stem_out: 8 * m,
        num_classes: 1 + below(rng, 20),
        resolution: 32,
        block: BlockTemplate {
            design,
            expansion: if design == BlockDesign::MambaBlock { 2.0 } else { 1.0 },
            posenc,
            activation: Activation::Silu,
            ..BlockTemplate::mila()
        },
        ..ModelSpec::mila_t()
    };
    let model = build_model::<f32>(&spec, rng)?;
    let counted = count_costs(&spec, 32)?.total_params;
    if model.param_count() == 0 {
        return Err(Error::Config("empty model".into()));
    }
    Ok((model.param_count() as f64 - counted as f64).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(fault: Option<&str>) -> RunConfig {
        RunConfig {
            instances: 20,
            inject_fault: fault.map(str::to_string),
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_suite_passes() {
        let r = verify(&small(None)).unwrap();
        assert!(r.passed, "{:?}", r.failed());
    }

    #[test]
    fn z_sign_fault_fails_only_recurrent_check() {
        let r = verify(&small(Some("z-sign"))).unwrap();
        assert_eq!(r.failed(), vec!["causal-recurrent"]);
    }

    #[test]
    fn report_is_deterministic() {
        let a = serde_json::to_string(&verify(&small(None)).unwrap()).unwrap();
        let b = serde_json::to_string(&verify(&small(None)).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
