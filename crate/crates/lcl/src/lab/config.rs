//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment. Keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `experiment` | `simulate`, `lyapunov`, `spectrum`, `malliavin`, `spanning`, `validate` | `lyapunov` |
//! | `nu`, `dt`, `kmax`, `gridsize`, `dealias` | solver | `0.05`, `1e-3`, `21`, `64`, `2/3` |
//! | `nstar`, `alpha`, `amplitude` | forcing `q_k = amplitude·|k|^{-alpha}` on `0 < |k| <= nstar` | `4`, `5.5`, `0.25` |
//! | `horizon` | trajectory length (time units, after burn-in) | `2000` |
//! | `ensemble` | trajectories / runs / sample points | `16` |
//! | `seed` | master seed | `0` |
//! | `tau0`, `T0` | Malliavin window `[tau0, T0]` | `0.1`, `0.5` |
//! | `ttilde` | comma-separated residual window lengths | `0.4,0.2,0.1` |
//! | `stride` | quadrature stride for `N` | `1` |
//! | `residual-runs` | Malliavin runs that also compute residuals | `50` |
//! | `branch-spacing` | time between Malliavin initial states | `1` |
//! | `burn-in` | burn-in time from rest | `100` |
//! | `renorm-interval`, `substeps` | cocycle windows and particle sub-stepping | `1`, `1` |
//! | `checkpoint-every` | checkpoint and monitor cadence (time units) | `10` |
//! | `sigma-v`, `alpha-v`, `eta` | super-Lyapunov weights and moment exponent | `1e-2`, `1`, `1e-3` |
//! | `output-path` | output directory | `out` |
//! | `resume` | continue from checkpoints found in `output-path` | `false` |
//! | `halt-after` | stop each trajectory after this much time (`0` = never) | `0` |

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LabError;
use crate::solver::{ForcingSpec, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Simulate,
    Lyapunov,
    Spectrum,
    Malliavin,
    Spanning,
    Validate,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        Self::Simulate,
        Self::Lyapunov,
        Self::Spectrum,
        Self::Malliavin,
        Self::Spanning,
        Self::Validate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Lyapunov => "lyapunov",
            Self::Spectrum => "spectrum",
            Self::Malliavin => "malliavin",
            Self::Spanning => "spanning",
            Self::Validate => "validate",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub solver: SolverConfig,
    pub forcing: ForcingSpec,
    pub experiment: ExperimentKind,
    pub horizon: f64,
    pub ensemble: usize,
    pub seed: u64,
    pub tau0: f64,
    pub t0: f64,
    pub ttilde: Vec<f64>,
    pub stride: usize,
    pub residual_runs: usize,
    pub branch_spacing: f64,
    pub burn_in: f64,
    pub renorm_interval: f64,
    pub substeps: usize,
    pub checkpoint_every: f64,
    pub sigma_v: f64,
    pub alpha_v: f64,
    pub eta: f64,
    pub output_path: PathBuf,
    pub resume: bool,
    pub halt_after: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            forcing: ForcingSpec::desk(),
            experiment: ExperimentKind::Lyapunov,
            horizon: 2000.0,
            ensemble: 16,
            seed: 0,
            tau0: 0.1,
            t0: 0.5,
            ttilde: vec![0.4, 0.2, 0.1],
            stride: 1,
            residual_runs: 50,
            branch_spacing: 1.0,
            burn_in: 100.0,
            renorm_interval: 1.0,
            substeps: 1,
            checkpoint_every: 10.0,
            sigma_v: 1e-2,
            alpha_v: 1.0,
            eta: 1e-3,
            output_path: PathBuf::from("out"),
            resume: false,
            halt_after: 0.0,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, LabError> {
    value
        .parse()
        .map_err(|_| LabError::Config(format!("bad value '{value}' for key '{key}'")))
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parse a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, LabError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one assignment. Forcing keys rebuild the forcing table.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), LabError> {
        let (mut nstar, mut alpha, mut amp) = (self.forcing.nstar, self.forcing.alpha, self.forcing.amplitude);
        match key {
            "experiment" => self.experiment = value.parse()?,
            "nu" => self.solver.nu = num(key, value)?,
            "dt" => self.solver.dt = num(key, value)?,
            "kmax" => self.solver.kmax = num(key, value)?,
            "gridsize" => self.solver.gridsize = num(key, value)?,
            "dealias" => self.solver.dealias = num(key, value)?,
            "nstar" => nstar = num(key, value)?,
            "alpha" => alpha = num(key, value)?,
            "amplitude" => amp = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "ensemble" => self.ensemble = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "tau0" => self.tau0 = num(key, value)?,
            "T0" => self.t0 = num(key, value)?,
            "ttilde" => {
                self.ttilde = value.split(',').map(|s| num(key, s.trim())).collect::<Result<_, _>>()?;
            }
            "stride" => self.stride = num(key, value)?,
            "residual-runs" => self.residual_runs = num(key, value)?,
            "branch-spacing" => self.branch_spacing = num(key, value)?,
            "burn-in" => self.burn_in = num(key, value)?,
            "renorm-interval" => self.renorm_interval = num(key, value)?,
            "substeps" => self.substeps = num(key, value)?,
            "checkpoint-every" => self.checkpoint_every = num(key, value)?,
            "sigma-v" => self.sigma_v = num(key, value)?,
            "alpha-v" => self.alpha_v = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "output-path" => self.output_path = PathBuf::from(value),
            "resume" => self.resume = num(key, value)?,
            "halt-after" => self.halt_after = num(key, value)?,
            _ => return Err(LabError::Config(format!("unknown key '{key}'"))),
        }
        if (nstar, alpha, amp) != (self.forcing.nstar, self.forcing.alpha, self.forcing.amplitude) {
            self.forcing = ForcingSpec::new(nstar, alpha, amp)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.solver.validate()?;
        let positive = [
            ("horizon", self.horizon),
            ("checkpoint-every", self.checkpoint_every),
            ("renorm-interval", self.renorm_interval),
            ("branch-spacing", self.branch_spacing),
            ("sigma-v", self.sigma_v),
            ("alpha-v", self.alpha_v),
            ("eta", self.eta),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(LabError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.ensemble == 0 || self.stride == 0 || self.substeps == 0 {
            return Err(LabError::Config("ensemble, stride and substeps must be positive".into()));
        }
        if !(self.burn_in >= 0.0) || !(self.halt_after >= 0.0) {
            return Err(LabError::Config("burn-in and halt-after must be non-negative".into()));
        }
        if self.experiment == ExperimentKind::Malliavin {
            if !(0.0 < self.tau0 && self.tau0 < self.t0 && self.t0 < 1.0) {
                return Err(LabError::Config(format!(
                    "need 0 < tau0 < T0 < 1, got tau0 = {}, T0 = {}",
                    self.tau0, self.t0
                )));
            }
            for &tt in &self.ttilde {
                if !(tt > 0.0) || self.tau0 + tt > self.t0 + 1e-12 {
                    return Err(LabError::Config(format!("ttilde {tt} must lie in (0, T0 - tau0]")));
                }
            }
        }
        Ok(())
    }

    /// Sorted `key = value` lines of every field that affects results.
    pub fn canonical(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![
            ("experiment", self.experiment.name().into()),
            ("nu", self.solver.nu.to_string()),
            ("dt", self.solver.dt.to_string()),
            ("kmax", self.solver.kmax.to_string()),
            ("gridsize", self.solver.gridsize.to_string()),
            ("dealias", self.solver.dealias.to_string()),
            ("nstar", self.forcing.nstar.to_string()),
            ("alpha", self.forcing.alpha.to_string()),
            ("amplitude", self.forcing.amplitude.to_string()),
            ("horizon", self.horizon.to_string()),
            ("ensemble", self.ensemble.to_string()),
            ("seed", self.seed.to_string()),
            ("tau0", self.tau0.to_string()),
            ("T0", self.t0.to_string()),
            ("ttilde", list(&self.ttilde)),
            ("stride", self.stride.to_string()),
            ("residual-runs", self.residual_runs.to_string()),
            ("branch-spacing", self.branch_spacing.to_string()),
            ("burn-in", self.burn_in.to_string()),
            ("renorm-interval", self.renorm_interval.to_string()),
            ("substeps", self.substeps.to_string()),
            ("checkpoint-every", self.checkpoint_every.to_string()),
            ("sigma-v", self.sigma_v.to_string()),
            ("alpha-v", self.alpha_v.to_string()),
            ("eta", self.eta.to_string()),
        ];
        kv.sort();
        let mut s = String::new();
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of [`canonical`](Self::canonical), hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}
