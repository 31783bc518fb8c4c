//! Entry points behind the command-line tool: equivalence verification,
//! scaling benchmarks, diagnostics and model cost reports.

mod bench;
mod diag;
mod verify;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::blocks::{count_costs, CostReport, ModelSpec, Residual};
use crate::error::{Error, Result};

pub use bench::{bench, hardware_info, BenchRecord, BenchReport, Growth, HardwareInfo, BENCH_CSV_HEADER, BENCH_MIXERS};
pub use diag::{diag, DiagReport, LayerDiag, NormDominance, PermutationProbe, DIAG_ALPHA, DIAG_SEEDS};
pub use verify::{verify, Check, VerifyReport, FAULTS};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    #[default]
    Verify,
    Bench,
    Model,
    Diag,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sizes {
    /// Sequence lengths, ascending.
    pub n: Vec<usize>,
    pub c: usize,
    pub d: usize,
    pub h: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            n: vec![1024, 2048, 4096, 8192],
            c: 32,
            d: 16,
            h: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub sizes: Sizes,
    /// Mixer preset for `diag` (default `selective-ssm`) or model name
    /// `T`/`S`/`B` for `model` (default `T`).
    pub preset: Option<String>,
    pub repeats: usize,
    pub warmup: usize,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub inject_fault: Option<String>,
    /// Random instances per verification check.
    pub instances: usize,
    /// Input resolution for `model`.
    pub resolution: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Verify,
            seed: 0,
            sizes: Sizes::default(),
            preset: None,
            repeats: 5,
            warmup: 1,
            out: None,
            format: Format::Json,
            inject_fault: None,
            instances: 100,
            resolution: 224,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.instances == 0 {
            return Err(Error::Config("instances must be at least 1".into()));
        }
        let s = &self.sizes;
        if s.n.is_empty() || s.n.contains(&0) || s.c == 0 || s.d == 0 || s.h == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if s.n.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("sequence lengths must be strictly ascending".into()));
        }
        if !s.c.is_multiple_of(s.h) || !s.d.is_multiple_of(s.h) {
            return Err(Error::Config(format!("C={} and d={} must both split into {} heads", s.c, s.d, s.h)));
        }
        if let Some(f) = &self.inject_fault {
            if !FAULTS.contains(&f.as_str()) {
                return Err(Error::Config(format!("unknown fault `{f}`, expected one of {}", FAULTS.join(", "))));
            }
        }
        Ok(())
    }
}

/// Cost report of a named model plus its deviation from published figures.
#[derive(Clone, Debug, Serialize)]
pub struct ModelReport {
    pub schema_version: u32,
    pub report: CostReport,
    pub residual: Option<Residual>,
}

pub fn model(cfg: &RunConfig) -> Result<ModelReport> {
    cfg.validate()?;
    let spec = ModelSpec::preset(cfg.preset.as_deref().unwrap_or("T"))?;
    let report = count_costs(&spec, cfg.resolution)?;
    let residual = spec.reference().filter(|_| cfg.resolution == 224).map(|r| report.residual(r));
    Ok(ModelReport {
        schema_version: REPORT_SCHEMA_VERSION,
        report,
        residual,
    })
}

impl ModelReport {
    /// Columns: `section,name,params,flops`.
    pub fn to_csv(&self) -> String {
        let r = &self.report;
        let mut s = String::from("section,name,params,flops\n");
        s += &format!("stem,stem,{},{}\n", r.stem_params, r.terms.stem);
        for st in &r.stages {
            s += &format!("stage,{},{},{}\n", st.index + 1, st.params, st.flops_total);
        }
        s += &format!("head,head,{},{}\n", r.head_params, r.terms.head);
        for (name, v) in r.terms.named() {
            s += &format!("term,{name},,{v}\n");
        }
        s += &format!("total,total,{},{}\n", r.total_params, r.total_flops);
        s
    }
}

/// Rendered output of a command and whether it succeeded.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub body: String,
    pub passed: bool,
}

fn render<R: Serialize>(report: &R) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Runs the configured command and renders its report.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let csv_unsupported = |what: &str| Error::Config(format!("csv output is not available for {what}"));
    match cfg.command {
        Command::Verify => {
            let r = verify(cfg)?;
            let body = match cfg.format {
                Format::Json => render(&r)?,
                Format::Csv => r.to_csv(),
            };
            Ok(Outcome { body, passed: r.passed })
        }
        Command::Bench => {
            let r = bench(cfg)?;
            let body = match cfg.format {
                Format::Json => render(&r)?,
                Format::Csv => r.to_csv(),
            };
            Ok(Outcome { body, passed: true })
        }
        Command::Model => {
            let r = model(cfg)?;
            let body = match cfg.format {
                Format::Json => render(&r)?,
                Format::Csv => r.to_csv(),
            };
            Ok(Outcome { body, passed: true })
        }
        Command::Diag => {
            if cfg.format == Format::Csv {
                return Err(csv_unsupported("diag"));
            }
            Ok(Outcome {
                body: render(&diag(cfg)?)?,
                passed: true,
            })
        }
    }
}
