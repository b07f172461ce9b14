//! Experiment orchestration: configuration, RNG stream layout, checkpoints,
//! monitored statistics and CSV/JSON output.
//!
//! Noise streams are keyed by `(seed, stream id)`:
//!
//! | stream id | use |
//! |---|---|
//! | `2i`, `2i + 1` | cocycle trajectory `i`: solver noise, initial particle |
//! | `2³²` | Malliavin parent trajectory |
//! | `2³² + 1 + i` | Malliavin run `i`: solver noise |
//! | `2³³ + i` | Malliavin run `i`: particle and direction `h` |
//! | `3·2³²` | spanning sample points and directions |
//!
//! Ensemble members run on a rayon pool capped by `LCL_THREADS`; results
//! are collected in trajectory order, so outputs do not depend on the
//! worker count.

mod checkpoint;
mod config;
mod experiments;
mod monitor;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lyapunov::LyapunovError;
use crate::malliavin::MalliavinError;
use crate::solver::SolverError;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, MAGIC, VERSION};
pub use config::{ExperimentConfig, ExperimentKind};
pub use experiments::{oracle_suite, OracleCheck};
pub use monitor::{ks_two_sample, moment_monitor, super_lyapunov_v, KsResult, MomentReport, MonitorSample};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Malliavin(#[from] MalliavinError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl LabError {
    /// Errors that end one ensemble member and are recorded rather than
    /// aborting the run.
    pub fn is_member_failure(&self) -> bool {
        let blowup = |e: &SolverError| matches!(e, SolverError::Blowup { .. });
        match self {
            LabError::Solver(e) => blowup(e),
            LabError::Lyapunov(LyapunovError::Solver(e)) => blowup(e),
            LabError::Malliavin(MalliavinError::Solver(e)) => blowup(e),
            LabError::Malliavin(MalliavinError::NonDegeneracy { .. }) => true,
            _ => false,
        }
    }
}

/// A CSV table: a `# units:` comment line, the header row, then rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: &'static str,
    pub columns: Vec<&'static str>,
    pub units: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: &'static str, columns: &[(&'static str, &'static str)]) -> Self {
        Self {
            file,
            columns: columns.iter().map(|c| c.0).collect(),
            units: columns.iter().map(|c| c.1).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# units: {}", self.units.join(","));
        let _ = writeln!(s, "{}", self.columns.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }
}

/// Shortest round-trip decimal form.
pub fn fmt_real(x: f64) -> String {
    format!("{x:e}")
}

/// One per-trajectory (or per-run) statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStat {
    pub trajectory: usize,
    pub quantity: String,
    pub value: f64,
    pub stderr: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub summary: serde_json::Value,
    pub tables: Vec<Table>,
    pub batches: Vec<BatchStat>,
    pub timings: BTreeMap<String, f64>,
    /// `false` when trajectories stopped at `halt-after`.
    pub complete: bool,
    /// Failed checks or trajectories.
    pub failures: usize,
}

pub trait Experiment: Send + Sync {
    fn kind(&self) -> ExperimentKind;
    fn run(&self, cfg: &ExperimentConfig) -> Result<ExperimentOutput, LabError>;
}

/// Experiment kind → pipeline.
pub struct ExperimentRegistry {
    map: BTreeMap<ExperimentKind, Box<dyn Experiment>>,
}

impl Default for ExperimentRegistry {
    fn default() -> Self {
        let mut r = Self { map: BTreeMap::new() };
        r.register(Box::new(experiments::Simulate));
        r.register(Box::new(experiments::Cocycle::lyapunov()));
        r.register(Box::new(experiments::Cocycle::spectrum()));
        r.register(Box::new(experiments::Malliavin));
        r.register(Box::new(experiments::Spanning));
        r.register(Box::new(experiments::Validate));
        r
    }
}

impl ExperimentRegistry {
    pub fn register(&mut self, e: Box<dyn Experiment>) {
        self.map.insert(e.kind(), e);
    }

    pub fn kinds(&self) -> Vec<ExperimentKind> {
        self.map.keys().copied().collect()
    }

    pub fn get(&self, kind: ExperimentKind) -> Result<&dyn Experiment, LabError> {
        self.map
            .get(&kind)
            .map(|b| b.as_ref())
            .ok_or_else(|| LabError::Config(format!("no pipeline registered for '{}'", kind.name())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub provenance: String,
    pub experiment: ExperimentKind,
    pub complete: bool,
    pub failures: usize,
    pub batches: Vec<BatchStat>,
    pub summary: serde_json::Value,
    /// Seconds; kept out of `summary.json`.
    pub wall_clock: f64,
}

pub fn provenance(hash: &str) -> String {
    format!("lcl-{}+{}", env!("CARGO_PKG_VERSION"), &hash[..12])
}

/// Worker count: available parallelism, capped by `LCL_THREADS`.
pub fn worker_count() -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("LCL_THREADS").ok().and_then(|s| s.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(avail),
        _ => avail,
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord, LabError> {
    run_with_threads(cfg, worker_count())
}

/// Run `cfg` on a pool of `threads` workers and write its outputs:
/// `summary.json`, `timing.json` and the experiment's CSV tables.
pub fn run_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<RunRecord, LabError> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(&cfg.output_path)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| LabError::Pool(e.to_string()))?;
    let registry = ExperimentRegistry::default();
    let exp = registry.get(cfg.experiment)?;
    let out = pool.install(|| exp.run(cfg))?;
    let hash = cfg.hash();
    let record = RunRecord {
        provenance: provenance(&hash),
        config_hash: hash,
        experiment: cfg.experiment,
        complete: out.complete,
        failures: out.failures,
        batches: out.batches,
        summary: out.summary,
        wall_clock: start.elapsed().as_secs_f64(),
    };
    if out.complete {
        for t in &out.tables {
            fs::write(cfg.output_path.join(t.file), t.render())?;
        }
    }
    let summary = serde_json::json!({
        "config_hash": record.config_hash,
        "provenance": record.provenance,
        "experiment": record.experiment,
        "complete": record.complete,
        "failures": record.failures,
        "config": cfg.canonical(),
        "batches": record.batches,
        "results": record.summary,
    });
    fs::write(cfg.output_path.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut timing = out.timings;
    timing.insert("total".into(), record.wall_clock);
    let timing = serde_json::json!({ "threads": threads, "seconds": timing });
    fs::write(cfg.output_path.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let mut t = Table::new("x.csv", &[("a", "-"), ("b", "time")]);
        t.push(vec!["1".into(), fmt_real(0.5)]);
        assert_eq!(t.render(), "# units: -,time\na,b\n1,5e-1\n");
    }

    #[test]
    fn registry_covers_every_kind() {
        let r = ExperimentRegistry::default();
        assert_eq!(r.kinds(), ExperimentKind::ALL.to_vec());
        for k in ExperimentKind::ALL {
            assert_eq!(r.get(k).unwrap().kind(), k);
        }
    }

    #[test]
    fn provenance_string() {
        let p = provenance(&"ab".repeat(32));
        assert!(p.starts_with("lcl-") && p.ends_with("+abababababab"));
    }
}
