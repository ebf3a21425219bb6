use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lora_bench::config::{parse_overrides, ExperimentConfig};
use lora_bench::experiments::{median_test_mse, run_sweep};
use lora_bench::BenchError;

/// Seeded sweeps of constructed and trained low-rank adapters.
///
/// Any config field can be overridden with `--key value` after the named
/// flags, e.g. `--experiment sweep-fnn --ranks [1,2,4] --train.iterations 500`.
#[derive(Parser, Debug)]
#[command(version)]
struct Cli {
    /// JSON config file; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Perturb frozen chains by this scale and retry once when a solve is ill-conditioned.
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, BenchError> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut pairs = parse_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed_base {
        pairs.push(("seed_base".into(), s.to_string()));
    }
    if let Some(d) = &cli.out_dir {
        pairs.push(("out_dir".into(), serde_json::to_string(d).expect("path serializes")));
    }
    if let Some(j) = cli.jitter {
        pairs.push(("jitter".into(), j.to_string()));
    }
    base.with_overrides(&pairs)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let out = match run_sweep(&cfg) {
        Ok(o) => o,
        Err(e @ BenchError::Config(_)) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    };

    println!("{:<14} {:>5} {:>8} {:>14}", "method", "rank", "params", "median_mse");
    for ((method, rank, params), m) in median_test_mse(&out.rows) {
        println!("{method:<14} {rank:>5} {params:>8} {m:>14.6e}");
    }
    for c in out.manifest.cells.iter().filter(|c| c.message.is_some()) {
        eprintln!("{} {:?}: {}", c.id, c.status, c.message.as_deref().unwrap_or(""));
    }
    if out.manifest.has_assumption_violations() {
        ExitCode::from(3)
    } else if out.manifest.has_failures() {
        ExitCode::from(4)
    } else {
        ExitCode::SUCCESS
    }
}
