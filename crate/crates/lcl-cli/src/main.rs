use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lcl::lab::{self, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "lcl", version, about = "Lagrangian chaos experiments for stochastic 2D Navier-Stokes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single trajectory with energy and super-Lyapunov monitoring.
    Simulate(Common),
    /// Top exponent by norm growth, QR and projective estimators.
    Lyapunov(Common),
    /// Both exponents by QR.
    Spectrum(Common),
    /// Partial Malliavin matrix spectra and control residuals.
    Malliavin(Common),
    /// Bracket spanning rank at random points.
    Spanning(Common),
    /// Analytic oracle suite; exits nonzero on any failure.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn build(kind: ExperimentKind, c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.experiment = kind;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_path = o.clone();
    }
    if let Some(e) = c.ensemble {
        cfg.ensemble = e;
    }
    if let Some(h) = c.horizon {
        cfg.horizon = h;
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("expected KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let (kind, common) = match &cli.command {
        Command::Simulate(c) => (ExperimentKind::Simulate, c),
        Command::Lyapunov(c) => (ExperimentKind::Lyapunov, c),
        Command::Spectrum(c) => (ExperimentKind::Spectrum, c),
        Command::Malliavin(c) => (ExperimentKind::Malliavin, c),
        Command::Spanning(c) => (ExperimentKind::Spanning, c),
        Command::Validate(c) => (ExperimentKind::Validate, c),
    };
    let cfg = build(kind, common)?;
    let rec = lab::run(&cfg)?;
    println!(
        "{} {} complete={} failures={} wall={:.1}s -> {}",
        kind.name(),
        rec.provenance,
        rec.complete,
        rec.failures,
        rec.wall_clock,
        cfg.output_path.display()
    );
    Ok(if rec.failures > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}
