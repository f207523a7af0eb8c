//! Command-line experiment runner.
//!
//! One subcommand per experiment kind; every run writes `records.csv`
//! and `records.json` into the output directory and prints a summary
//! table. Exit codes: 0 on success, 2 when every optimized run missed
//! its requirements, 1 on errors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use cellfree::{Scheme, SystemConfig};
use cellfree_cli::{emit, run, ExperimentKind, ExperimentSpec};

#[derive(Debug, Parser)]
#[command(name = "cellfree", about = "Cell-free massive MIMO URLLC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (flat key = value); defaults to the built-in scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for records.csv / records.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed; trial t derives its own seed from (seed, t).
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Random device drops per grid cell.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Channel draws for Monte Carlo estimates.
    #[arg(long, default_value_t = 10_000)]
    mc_draws: usize,
    /// Precoding scheme override: mrt | fzf | lzf.
    #[arg(long)]
    scheme: Option<String>,
    /// Comma-separated grid values (defaults depend on the experiment).
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rate-bound tightness against Monte Carlo at fixed link powers.
    Tightness(Common),
    /// Optimizer objective trace per iteration.
    Convergence(Common),
    /// Sweep the AP-selection threshold.
    ThresholdSweep(Common),
    /// Sweep the pilot power cap (W).
    PilotSweep(Common),
    /// Sweep the AP count at a fixed total antenna budget.
    ApCountSweep(Common),
    /// Sweep the device count (round-robin once devices reach the
    /// antenna count).
    DeviceSweep(Common),
    /// Monte Carlo verification of the closed-form SINR terms.
    VerifyTheorems(Common),
}

impl Command {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Command::Tightness(c) => (ExperimentKind::Tightness, c),
            Command::Convergence(c) => (ExperimentKind::Convergence, c),
            Command::ThresholdSweep(c) => (ExperimentKind::ThresholdSweep, c),
            Command::PilotSweep(c) => (ExperimentKind::PilotSweep, c),
            Command::ApCountSweep(c) => (ExperimentKind::ApCountSweep, c),
            Command::DeviceSweep(c) => (ExperimentKind::DeviceSweep, c),
            Command::VerifyTheorems(c) => (ExperimentKind::VerifyTheorems, c),
        }
    }
}

fn default_grid(kind: ExperimentKind, base: &SystemConfig) -> Vec<f64> {
    let total = (base.num_aps * base.antennas_per_ap) as f64;
    match kind {
        ExperimentKind::Tightness => vec![total / 2.0, total, total * 2.0],
        ExperimentKind::ThresholdSweep => vec![0.85, 0.9, 0.95, 1.0],
        ExperimentKind::PilotSweep => vec![0.001, 0.01, 0.1],
        ExperimentKind::ApCountSweep => vec![1.0, 4.0, 9.0, 16.0],
        ExperimentKind::DeviceSweep => vec![4.0, 8.0, 12.0, 16.0],
        ExperimentKind::Convergence | ExperimentKind::VerifyTheorems => Vec::new(),
    }
}

fn parse_grid(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().with_context(|| format!("bad grid value '{p}'")))
        .collect()
}

fn execute() -> anyhow::Result<bool> {
    let cli = Cli::parse();
    let (kind, common) = cli.command.split();

    let mut base = match &common.config {
        Some(path) => SystemConfig::from_file(path).map_err(|e| anyhow::anyhow!("{e}"))?,
        None => SystemConfig::baseline(),
    };
    if let Some(s) = &common.scheme {
        base.scheme = Scheme::parse(s).map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    let grid = match &common.grid {
        Some(s) => parse_grid(s)?,
        None => default_grid(kind, &base),
    };

    // fail on unwritable output before any computation starts
    std::fs::create_dir_all(&common.out)
        .with_context(|| format!("cannot create output directory {}", common.out.display()))?;
    let probe = common.out.join(".write_probe");
    std::fs::write(&probe, b"ok")
        .with_context(|| format!("output directory {} is not writable", common.out.display()))?;
    let _ = std::fs::remove_file(&probe);

    let spec = ExperimentSpec {
        kind,
        grid,
        trials: common.trials,
        mc_draws: common.mc_draws,
        base,
        master_seed: common.seed,
    };
    let summary = run(&spec)?;
    let (csv_path, json_path) = emit(&summary.records, &common.out)?;
    print!("{}", summary.table);
    eprintln!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(summary.any_feasible)
}

fn main() -> ExitCode {
    match execute() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
