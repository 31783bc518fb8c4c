//! Acceptance suite. Runs sequentially (the timing criterion must not share
//! the machine with other work) and prints one PASS/FAIL line per criterion.

use std::process::ExitCode;
use std::time::Instant;

use mixerlab::attention::{attention_weights, AttnParams, Kernel, WeightForm};
use mixerlab::blocks::{build_model, count_costs, mila_block_closed_form, BlockSpec, block_flops, ModelSpec, Parameterized};
use mixerlab::harness::{bench, diag, hardware_info, verify, Command, RunConfig, Sizes};
use mixerlab::ssm::{discretization_gap, discretize, forget_gate, Discretization, SsmParams};
use mixerlab::unified::{from_ssm, normalized_weights, unified_forward, MixerConfig, MixerDims, UnifiedParams};
use mixerlab::{Rng, TokenMatrix};

struct Line {
    id: &'static str,
    passed: bool,
}

fn report(lines: &mut Vec<Line>, id: &'static str, passed: bool, detail: String) {
    println!("criterion {id}: {} | {detail}", if passed { "PASS" } else { "FAIL" });
    lines.push(Line { id, passed });
}

fn criterion_1(lines: &mut Vec<Line>) {
    let start = Instant::now();
    let cfg = RunConfig {
        instances: 100,
        seed: 0,
        ..RunConfig::default()
    };
    let r = verify(&cfg).expect("verify runs");
    let secs = start.elapsed().as_secs_f64();
    let wanted = [
        ("linear-reorder", 1e-10),
        ("causal-recurrent", 1e-12),
        ("ssm-forms", 1e-12),
        ("unified-linear-preset", 1e-12),
        ("unified-ssm-preset", 1e-12),
        ("scan-chunks", 1e-12),
        ("ssm-chunked-scan", 1e-12),
    ];
    let mut ok = r.passed && secs < 60.0;
    let mut parts = Vec::new();
    for (name, tol) in wanted {
        let c = r.checks.iter().find(|c| c.name == name).expect("check present");
        ok &= c.instances >= 100 && c.max_error <= tol && c.passed;
        parts.push(format!("{name} {:.1e}<={tol:.0e}", c.max_error));
    }
    report(lines, "1", ok, format!("{} ({} checks, {secs:.1}s < 60s)", parts.join(", "), r.checks.len()));
}

fn criterion_2(lines: &mut Vec<Line>) {
    let mut ok = true;
    let mut parts = Vec::new();
    for spec in [ModelSpec::mila_t(), ModelSpec::mila_s(), ModelSpec::mila_b()] {
        let r = count_costs(&spec, 224).expect("costs");
        let res = r.residual(spec.reference().expect("preset reference"));
        ok &= res.params_rel.abs() <= 0.10 && res.flops_rel.abs() <= 0.20 && r.terms.total() == r.total_flops;
        parts.push(format!(
            "{} params {:.2}M ({:+.1}%) flops {:.2}G ({:+.1}%)",
            spec.name,
            r.total_params as f64 / 1e6,
            100.0 * res.params_rel,
            r.total_flops as f64 / 1e9,
            100.0 * res.flops_rel
        ));
    }
    let mut block = BlockSpec::mila(256, 8);
    block.posenc.clear();
    let eq = block_flops(&block, &block.default_mixer(), 196).total();
    ok &= eq == 170_648_576 && mila_block_closed_form(196, 256, 32, 3) == 170_648_576;
    parts.push(format!("single block {eq}"));
    let t = ModelSpec::mila_t();
    let model = build_model::<f32>(&t, &mut Rng::new(0)).expect("build");
    let allocated = model.param_count() as u64;
    let counted = count_costs(&t, 224).expect("costs").total_params;
    ok &= allocated == counted;
    parts.push(format!("mila-t allocated {allocated} == counted {counted}"));
    report(lines, "2", ok, parts.join("; "));
}

fn swap_first_two(x: &TokenMatrix) -> TokenMatrix {
    let mut s = x.clone();
    s.row_mut(0).copy_from_slice(x.row(1));
    s.row_mut(1).copy_from_slice(x.row(0));
    s
}

fn criterion_3(lines: &mut Vec<Line>) {
    let root = Rng::new(3);
    let (mut off_max, mut on_min) = (0.0f64, f64::INFINITY);
    let (mut g_lo, mut g_hi, mut delta_min) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
    let mut sum_err = 0.0f64;
    for i in 0..100u64 {
        let mut rng = root.split(i);
        let n = 3 + (rng.next_u64() % 62) as usize;
        let c = 1 + (rng.next_u64() % 32) as usize;
        let d = 1 + (rng.next_u64() % 16) as usize;
        let x: TokenMatrix = rng.uniform_matrix(n, c, -1.0, 1.0);
        let ssm = SsmParams::random(c, d, None, &mut rng).unwrap();
        let (p, cfg) = from_ssm(&ssm);
        let later = |m: &TokenMatrix| m.row_block(2, n - 2);
        let delta = |cfg: &MixerConfig| {
            later(&unified_forward(&x, &p, cfg).unwrap()).max_abs_diff(&later(&unified_forward(&swap_first_two(&x), &p, cfg).unwrap()))
        };
        on_min = on_min.min(delta(&cfg));
        off_max = off_max.max(delta(&MixerConfig { forget_gate: false, ..cfg }));

        let sel = ssm.select(&x).unwrap();
        for t in 0..n {
            for &g in forget_gate(&ssm.a_diag, sel.delta.row(t)).as_slice() {
                g_lo = g_lo.min(g);
                g_hi = g_hi.max(g);
            }
        }
        delta_min = sel.delta.as_slice().iter().copied().fold(delta_min, f64::min);

        let dims = MixerDims::new(4 * (1 + c % 4), 4);
        let xu: TokenMatrix = rng.uniform_matrix(n, dims.channels, -1.0, 1.0);
        let pu = UnifiedParams::random(dims, Kernel::EluPlusOne, &mut rng);
        for forget in [false, true] {
            let cfg = MixerConfig { forget_gate: forget, input_gate: forget, ..MixerConfig::linear_attention(dims, 2) };
            let w = normalized_weights(&xu, &pu, &cfg, (i as usize) % dims.channels).unwrap();
            for r in 0..n {
                sum_err = sum_err.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
        let a = AttnParams::random(dims.channels, 4, 2, Kernel::EluPlusOne, &mut rng).unwrap();
        for form in [WeightForm::LinearGlobal, WeightForm::LinearCausal] {
            for w in attention_weights(&xu, &a, form).unwrap() {
                for r in 0..n {
                    sum_err = sum_err.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    let mut fractions = Vec::new();
    for preset in ["selective-ssm", "linear-attention"] {
        let cfg = RunConfig {
            command: Command::Diag,
            preset: Some(preset.into()),
            sizes: Sizes { n: vec![64], c: 32, d: 16, h: 1 },
            ..RunConfig::default()
        };
        fractions.push((preset, diag(&cfg).unwrap().norm_dominance.fraction));
    }
    let a_ok = off_max <= 1e-12 && on_min > 1e-6;
    let b_ok = g_lo > 0.0 && g_hi < 1.0 && delta_min > 0.0;
    let c_ok = sum_err <= 1e-10;
    let d_ok = fractions.iter().all(|(_, f)| *f >= 0.9);
    report(
        lines,
        "3",
        a_ok && b_ok && c_ok && d_ok,
        format!(
            "(a) forget-off delta {off_max:.1e} <= 1e-12, forget-on min delta {on_min:.1e} > 1e-6; \
             (b) gate in [{g_lo:.4}, {g_hi:.6}], min input gate {delta_min:.2e}; \
             (c) weight-sum error {sum_err:.1e} <= 1e-10; \
             (d) norm-off std > norm-on std on {} of 50 seeds (alpha 8)",
            fractions.iter().map(|(p, f)| format!("{p} {:.0}%", 100.0 * f)).collect::<Vec<_>>().join(", ")
        ),
    );
}

fn criterion_4(lines: &mut Vec<Line>) {
    let hw = hardware_info();
    let cfg = RunConfig {
        command: Command::Bench,
        sizes: Sizes { n: vec![1024, 2048, 4096, 8192], c: 32, d: 16, h: 1 },
        repeats: 7,
        warmup: 1,
        ..RunConfig::default()
    };
    let r = bench(&cfg).expect("bench");
    let mut ok = true;
    let mut parts = Vec::new();
    for (mixer, lo, hi) in [
        ("linear_attention_parallel", 1.5, 3.0),
        ("scan_serial", 1.5, 3.0),
        ("scan_parallel", 1.5, 3.0),
        ("softmax_attention", 3.0, 6.0),
    ] {
        let ratios = r.ratios(mixer);
        ok &= ratios.len() == 3 && ratios.iter().all(|x| (lo..=hi).contains(x));
        let shown: Vec<String> = ratios.iter().map(|x| format!("{x:.2}")).collect();
        parts.push(format!("{mixer} [{}] in [{lo}, {hi}]", shown.join(", ")));
    }
    report(
        lines,
        "4",
        ok,
        format!(
            "{}; hardware: {} ({} logical CPUs, {} workers, {}/{}); machine-dependent",
            parts.join("; "),
            hw.cpu,
            hw.logical_cpus,
            hw.worker_threads,
            hw.os,
            hw.arch
        ),
    );
}

fn criterion_5(lines: &mut Vec<Line>) {
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a: Vec<f64> = (0..16).map(|_| -rng.uniform(-4.0, 1.0).exp()).collect();
        let b = rng.uniform_vec::<f64>(16, -1.0, 1.0);
        let delta = rng.uniform(-7.0, 0.0).exp();
        for mode in [Discretization::ExactZoh, Discretization::Simplified] {
            let pair = discretize(&a, &b, delta, mode).unwrap();
            for (&got, &av) in pair.a_bar.iter().zip(&a) {
                let want = (delta * av).exp();
                worst = worst.max((got - want).abs() / want);
            }
        }
    }
    let mut ratios = Vec::new();
    for &a in &[-0.25, -1.0, -2.0, -4.0] {
        let g: Vec<f64> = [0.1, 0.01, 0.001].iter().map(|&d| discretization_gap(a, 1.0, d).unwrap()).collect();
        ratios.push(g[0] / g[1]);
        ratios.push(g[1] / g[2]);
    }
    let ok = worst <= f64::EPSILON && ratios.iter().all(|r| (8.0..=12.0).contains(r));
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    report(
        lines,
        "5",
        ok,
        format!("max rel |A_bar - exp(delta a)| {worst:.1e}; gap ratio per decade [{}] in [8, 12]", shown.join(", ")),
    );
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    criterion_1(&mut lines);
    criterion_2(&mut lines);
    criterion_3(&mut lines);
    criterion_4(&mut lines);
    criterion_5(&mut lines);
    println!(
        "criterion 6: NOT REPRODUCIBLE | ImageNet top-1, COCO AP and ADE20K mIoU need full training; replaced by criteria 1-5 (see README)"
    );
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("acceptance: all of criteria 1-5 passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
