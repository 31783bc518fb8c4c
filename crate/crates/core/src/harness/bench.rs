//! Wall-clock scaling of the mixers. Absolute times are machine-dependent;
//! the growth ratios `time(2N) / time(N)` are what the reports are for.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{RunConfig, REPORT_SCHEMA_VERSION};
use crate::attention::{linear_attention_parallel, softmax_attention, AttnParams, Kernel};
use crate::error::Result;
use crate::numerics::{Matrix, Rng};
use crate::ssm::{selective_scan_parallel, selective_scan_serial, SsmParams};

pub const BENCH_MIXERS: [&str; 4] = ["softmax_attention", "linear_attention_parallel", "scan_serial", "scan_parallel"];

/// Fixed column order of [`BenchReport::to_csv`].
pub const BENCH_CSV_HEADER: &str = "mixer,n,repeats,inner_iters,median_s,p10_s,p90_s,throughput_tokens_per_s,checksum";

/// Minimum duration of one timed sample; short runs are repeated inside a
/// sample until they reach it.
const MIN_SAMPLE: Duration = Duration::from_millis(50);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub mixer: &'static str,
    pub n: usize,
    pub repeats: usize,
    pub inner_iters: usize,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    pub throughput_tokens_per_s: f64,
    /// Checksum of the mixer output; identical across repeats.
    pub checksum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Growth {
    pub mixer: &'static str,
    pub n_from: usize,
    pub n_to: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HardwareInfo {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpu: String,
    pub logical_cpus: usize,
    pub worker_threads: usize,
}

pub fn hardware_info() -> HardwareInfo {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".to_string());
    HardwareInfo {
        os: std::env::consts::OS,
        arch: std::env::consts::ARCH,
        cpu,
        logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        worker_threads: rayon::current_num_threads(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub seed: u64,
    pub c: usize,
    pub d: usize,
    pub heads: usize,
    pub hardware: HardwareInfo,
    pub records: Vec<BenchRecord>,
    pub growth: Vec<Growth>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{BENCH_CSV_HEADER}\n");
        for r in &self.records {
            s += &format!(
                "{},{},{},{},{:e},{:e},{:e},{:e},{:e}\n",
                r.mixer, r.n, r.repeats, r.inner_iters, r.median_s, r.p10_s, r.p90_s, r.throughput_tokens_per_s, r.checksum
            );
        }
        s
    }

    pub fn ratios(&self, mixer: &str) -> Vec<f64> {
        self.growth.iter().filter(|g| g.mixer == mixer).map(|g| g.ratio).collect()
    }
}

type Job<'a> = Box<dyn Fn() -> Result<f64> + 'a>;

/// One `(mixer, N)` measurement: calibrated inner iteration count, per-call
/// sample times and the checksum of the last output.
struct Case<'a> {
    mixer: &'static str,
    n: usize,
    run: Job<'a>,
    iters: usize,
    samples: Vec<f64>,
    checksum: f64,
}

impl Case<'_> {
    fn calibrate(&mut self, warmup: usize) -> Result<()> {
        for _ in 0..warmup {
            black_box((self.run)()?);
        }
        let start = Instant::now();
        self.checksum = black_box((self.run)()?);
        let once = start.elapsed();
        self.iters = if once >= MIN_SAMPLE {
            1
        } else {
            (MIN_SAMPLE.as_secs_f64() / once.as_secs_f64().max(1e-9)).ceil() as usize
        };
        Ok(())
    }

    fn sample(&mut self) -> Result<()> {
        let t = Instant::now();
        for _ in 0..self.iters {
            self.checksum = black_box((self.run)()?);
        }
        self.samples.push(t.elapsed().as_secs_f64() / self.iters as f64);
        Ok(())
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times every mixer at every `N` in `cfg.sizes.n`.
pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let s = &cfg.sizes;
    let root = Rng::new(cfg.seed);
    let mut rng = root.split(0);
    let attn = AttnParams::<f64>::random(s.c, s.d, s.h, Kernel::EluPlusOne, &mut rng)?;
    let ssm = SsmParams::<f64>::random(s.c, s.d, None, &mut rng)?;
    let chunks = 8 * rayon::current_num_threads();
    let xs: Vec<Matrix<f64>> =
        s.n.iter().enumerate().map(|(k, &n)| root.split(1 + k as u64).uniform_matrix(n, s.c, -1.0, 1.0)).collect();
    let (attn, ssm) = (&attn, &ssm);
    let mut cases = Vec::new();
    for (x, &n) in xs.iter().zip(&s.n) {
        for mixer in BENCH_MIXERS {
            let run: Job<'_> = match mixer {
                "softmax_attention" => Box::new(move || Ok(softmax_attention(x, attn)?.checksum())),
                "linear_attention_parallel" => Box::new(move || Ok(linear_attention_parallel(x, attn)?.checksum())),
                "scan_serial" => Box::new(move || Ok(selective_scan_serial(x, ssm)?.checksum())),
                _ => Box::new(move || Ok(selective_scan_parallel(x, ssm, chunks)?.checksum())),
            };
            cases.push(Case { mixer, n, run, iters: 1, samples: Vec::new(), checksum: 0.0 });
        }
    }
    for case in &mut cases {
        case.calibrate(cfg.warmup)?;
    }
    // Samples are interleaved across sizes, alternating direction each round,
    // so slow drift in machine speed hits every N alike instead of skewing
    // the growth ratios.
    for round in 0..cfg.repeats {
        let order: Vec<usize> = if round % 2 == 0 { (0..cases.len()).collect() } else { (0..cases.len()).rev().collect() };
        for i in order {
            cases[i].sample()?;
        }
    }
    let records: Vec<BenchRecord> = cases
        .into_iter()
        .map(|mut c| {
            c.samples.sort_by(f64::total_cmp);
            let median = quantile(&c.samples, 0.5);
            BenchRecord {
                mixer: c.mixer,
                n: c.n,
                repeats: cfg.repeats,
                inner_iters: c.iters,
                median_s: median,
                p10_s: quantile(&c.samples, 0.1),
                p90_s: quantile(&c.samples, 0.9),
                throughput_tokens_per_s: c.n as f64 / median,
                checksum: c.checksum,
            }
        })
        .collect();
    let mut growth = Vec::new();
    for mixer in BENCH_MIXERS {
        let rs: Vec<&BenchRecord> = records.iter().filter(|r| r.mixer == mixer).collect();
        for w in rs.windows(2) {
            growth.push(Growth {
                mixer,
                n_from: w[0].n,
                n_to: w[1].n,
                ratio: w[1].median_s / w[0].median_s,
            });
        }
    }
    Ok(BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.seed,
        c: s.c,
        d: s.d,
        heads: s.h,
        hardware: hardware_info(),
        records,
        growth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{Command, Sizes};

    #[test]
    fn small_bench_records_and_checksums() {
        let cfg = RunConfig {
            command: Command::Bench,
            sizes: Sizes { n: vec![16, 32], c: 8, d: 4, h: 1 },
            repeats: 2,
            warmup: 0,
            ..RunConfig::default()
        };
        let a = bench(&cfg).unwrap();
        assert_eq!(a.records.len(), 8);
        assert_eq!(a.growth.len(), 4);
        assert!(a.records.iter().all(|r| r.median_s > 0.0 && r.checksum.is_finite()));
        let b = bench(&cfg).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.checksum, y.checksum);
        }
        let at16: Vec<f64> = a.records.iter().filter(|r| r.n == 16).map(|r| r.checksum).collect();
        assert_ne!(at16[0], at16[1]);
        assert_eq!(a.to_csv().lines().next().unwrap(), BENCH_CSV_HEADER);
    }
}
