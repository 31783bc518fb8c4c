//! `mixerlab <verify|bench|model|diag> [options]`
//!
//! Exit codes: 0 success, 1 a check failed (or the run errored), 2 usage
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use mixerlab::harness::{run, Command, Format, RunConfig};
use mixerlab::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Verify,
    Bench,
    Model,
    Diag,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fmt {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "mixerlab", version, about = "Equivalence checks, scaling benchmarks, diagnostics and cost reports")]
struct Args {
    command: Cmd,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with RunConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sequence lengths, e.g. 1024,2048,4096
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Mixer preset (diag) or model T|S|B (model).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum)]
    format: Option<Fmt>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    inject_fault: Option<String>,
    /// Random instances per verification check.
    #[arg(long)]
    instances: Option<usize>,
    /// Input resolution for `model`.
    #[arg(long)]
    resolution: Option<usize>,
}

fn build_config(args: Args) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    cfg.command = match args.command {
        Cmd::Verify => Command::Verify,
        Cmd::Bench => Command::Bench,
        Cmd::Model => Command::Model,
        Cmd::Diag => Command::Diag,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.sizes {
        cfg.sizes.n = n;
    }
    if args.preset.is_some() {
        cfg.preset = args.preset;
    }
    if let Some(f) = args.format {
        cfg.format = match f {
            Fmt::Json => Format::Json,
            Fmt::Csv => Format::Csv,
        };
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    if let Some(w) = args.warmup {
        cfg.warmup = w;
    }
    if args.inject_fault.is_some() {
        cfg.inject_fault = args.inject_fault;
    }
    if let Some(i) = args.instances {
        cfg.instances = i;
    }
    if let Some(r) = args.resolution {
        cfg.resolution = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::UnknownToggle(_) | Error::Json(_) | Error::Io(_) | Error::Domain(_))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match build_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("mixerlab: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = match run(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("mixerlab: {e}");
            return ExitCode::from(if usage_error(&e) { 2 } else { 1 });
        }
    };
    let written = match &cfg.out {
        Some(path) => std::fs::write(path, &outcome.body),
        None => {
            print!("{}", outcome.body);
            Ok(())
        }
    };
    if let Err(e) = written {
        eprintln!("mixerlab: {e}");
        return ExitCode::from(1);
    }
    if outcome.passed {
        ExitCode::SUCCESS
    } else {
        eprintln!("mixerlab: checks failed");
        ExitCode::from(1)
    }
}
