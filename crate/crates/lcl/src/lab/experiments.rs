//! The registered pipelines.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};
use super::monitor::{ks_two_sample, moment_monitor, super_lyapunov_v, MonitorSample};
use super::{fmt_real, BatchStat, Experiment, ExperimentConfig, ExperimentKind, ExperimentOutput, LabError, Table};
use crate::brackets::{bracket_ek_fbar, fd_bracket, fbar_eval, spanning_rank, BracketContext, BundleField};
use crate::flow::{normalize, Driver, ParticleState, SnsDriver};
use crate::lyapunov::{pool, Cocycle as CocycleRun, EstimatorRegistry, ExponentEstimate, LyapunovConfig};
use crate::malliavin::{min_eig_tail, FullModel, FullTangent, LowModeVector, Malliavin as Mall, TrajectoryRecord};
use crate::solver::{enstrophy, energy, NoiseStream, SnsState, Solver, SolverConfig};
use crate::spectral::{SpectralVelocity, WaveVector};

const MALL_PARENT: u64 = 1 << 32;
const MALL_PARTICLE: u64 = 1 << 33;
const SPANNING: u64 = 3 << 32;

/// Uniform position on the torus, uniform direction on the circle.
fn random_particle(rng: &mut NoiseStream) -> ParticleState {
    let x = [2.0 * PI * rng.uniform(), 2.0 * PI * rng.uniform()];
    let th = 2.0 * PI * rng.uniform();
    ParticleState::new(x, [th.cos(), th.sin()])
}

fn burned_in(cfg: &ExperimentConfig, stream: u64) -> Result<SnsDriver, LabError> {
    let mut solver = Solver::new(cfg.solver.clone(), cfg.forcing.clone())?;
    let mut st = SnsState::zero(cfg.solver.kmax);
    let mut rng = NoiseStream::new(cfg.seed, stream);
    solver.burn_in(&mut st, &mut rng, cfg.burn_in)?;
    Ok(SnsDriver::new(solver, st, rng))
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn est_json(e: &ExponentEstimate) -> serde_json::Value {
    let (lo, hi) = e.ci95();
    json!({ "value": e.value, "stderr": e.stderr, "horizon": e.horizon, "batches": e.batches, "ci95": [lo, hi] })
}

// ---------------------------------------------------------------- simulate

pub struct Simulate;

impl Experiment for Simulate {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Simulate
    }

    fn run(&self, cfg: &ExperimentConfig) -> Result<ExperimentOutput, LabError> {
        let t = Instant::now();
        let mut d = burned_in(cfg, 0)?;
        let burn = elapsed(t);
        let dt = cfg.solver.dt;
        let per = (cfg.checkpoint_every / dt).round().max(1.0) as usize;
        let count = (cfg.horizon / (per as f64 * dt)).round() as usize;
        let mut table = Table::new(
            "trajectory.csv",
            &[("t", "time"), ("energy", "coef^2"), ("enstrophy", "coef^2"), ("grad_sq", "coef^2"), ("V", "-")],
        );
        let mut samples = Vec::with_capacity(count);
        let mut failures = 0;
        let mut error = None;
        'outer: for _ in 0..count {
            for _ in 0..per {
                if let Err(e) = d.advance() {
                    failures = 1;
                    error = Some(e.to_string());
                    break 'outer;
                }
            }
            let u = &d.state().u;
            let s = MonitorSample::of(u, d.time(), cfg.sigma_v, cfg.alpha_v);
            table.push(vec![fmt_real(s.t), fmt_real(energy(u)), fmt_real(enstrophy(u)), fmt_real(s.grad_sq), fmt_real(s.v)]);
            samples.push(s);
        }
        let report = moment_monitor(&samples, 10, cfg.eta);
        let e: Vec<f64> = table.rows.iter().map(|r| r[1].parse().unwrap()).collect();
        let ks = ks_two_sample(&e[..e.len() / 2], &e[e.len() / 2..]);
        let mut timings = BTreeMap::new();
        timings.insert("burn_in".into(), burn);
        timings.insert("trajectory".into(), elapsed(t) - burn);
        Ok(ExperimentOutput {
            summary: json!({
                "samples": samples.len(),
                "moments": report,
                "energy_halves_ks": ks,
                "mean_energy": e.iter().sum::<f64>() / e.len().max(1) as f64,
                "error": error,
            }),
            tables: vec![table],
            batches: Vec::new(),
            timings,
            complete: true,
            failures,
        })
    }
}

// ------------------------------------------------------- lyapunov/spectrum

/// Cocycle ensemble feeding the named estimators.
pub struct Cocycle {
    kind: ExperimentKind,
    estimators: &'static [&'static str],
}

impl Cocycle {
    pub fn lyapunov() -> Self {
        Self { kind: ExperimentKind::Lyapunov, estimators: &["norm", "qr", "projective"] }
    }

    pub fn spectrum() -> Self {
        Self { kind: ExperimentKind::Spectrum, estimators: &["qr"] }
    }
}

struct TrajOutcome {
    estimates: BTreeMap<&'static str, Vec<ExponentEstimate>>,
    halted: bool,
    seconds: f64,
}

fn lyapunov_config(cfg: &ExperimentConfig) -> LyapunovConfig {
    LyapunovConfig {
        horizon: cfg.horizon,
        renorm_interval: cfg.renorm_interval,
        substeps: cfg.substeps,
        ..Default::default()
    }
}

fn cocycle_trajectory(cfg: &ExperimentConfig, i: usize, names: &[&'static str], dir: &Path) -> Result<TrajOutcome, LabError> {
    let start = Instant::now();
    let lcfg = lyapunov_config(cfg);
    let reg = EstimatorRegistry::default();
    let estimators = names.iter().map(|n| reg.build(n, &lcfg)).collect::<Result<Vec<_>, _>>()?;
    let path = dir.join(format!("traj_{i:04}.bin"));
    let stream = 2 * i as u64;
    let (mut driver, mut c) = if cfg.resume && path.exists() {
        let ck = checkpoint_load(&path)?;
        if ck.seed != cfg.seed || ck.stream != stream || ck.state.u.kmax() != cfg.solver.kmax {
            return Err(LabError::Checkpoint(format!("{} belongs to a different run", path.display())));
        }
        let solver = Solver::new(cfg.solver.clone(), cfg.forcing.clone())?;
        let driver = SnsDriver::new(solver, ck.state.clone(), ck.noise());
        let mut c = CocycleRun::new(cfg.solver.dt, ck.particle, &lcfg, estimators)?;
        c.tangent = ck.tangent;
        c.windows_done = ck.windows_done as usize;
        if ck.accumulators.len() != c.estimators.len() {
            return Err(LabError::Checkpoint("estimator set differs from the checkpoint".into()));
        }
        for (e, (name, data)) in c.estimators.iter_mut().zip(&ck.accumulators) {
            if e.name() != name {
                return Err(LabError::Checkpoint(format!("expected estimator '{}', found '{name}'", e.name())));
            }
            e.restore(data)?;
        }
        (driver, c)
    } else {
        let driver = burned_in(cfg, stream)?;
        let p = random_particle(&mut NoiseStream::new(cfg.seed, stream + 1));
        (driver, CocycleRun::new(cfg.solver.dt, p, &lcfg, estimators)?)
    };
    let per_ck = (cfg.checkpoint_every / c.window()).round().max(1.0) as usize;
    let halt = if cfg.halt_after > 0.0 { (cfg.halt_after / c.window()).round() as usize } else { usize::MAX };
    let mut halted = false;
    while !c.is_done() {
        let n = per_ck.min(halt.saturating_sub(c.windows_done));
        if n == 0 {
            halted = true;
            break;
        }
        c.advance(&mut driver, n)?;
        let rng = driver.rng();
        let ck = Checkpoint {
            state: driver.state().clone(),
            seed: rng.seed(),
            stream: rng.stream_id(),
            counter: rng.counter(),
            particle: c.particle,
            tangent: c.tangent,
            windows_done: c.windows_done as u64,
            accumulators: c.estimators.iter().map(|e| (e.name().to_string(), e.accumulators())).collect(),
        };
        checkpoint_save(&ck, &path)?;
    }
    Ok(TrajOutcome { estimates: c.finish().estimates, halted, seconds: elapsed(start) })
}

impl Experiment for Cocycle {
    fn kind(&self) -> ExperimentKind {
        self.kind
    }

    fn run(&self, cfg: &ExperimentConfig) -> Result<ExperimentOutput, LabError> {
        let dir = cfg.output_path.join("checkpoints");
        std::fs::create_dir_all(&dir)?;
        let results: Vec<Result<TrajOutcome, LabError>> = (0..cfg.ensemble)
            .into_par_iter()
            .map(|i| cocycle_trajectory(cfg, i, self.estimators, &dir))
            .collect();

        let mut out = ExperimentOutput { complete: true, ..Default::default() };
        let mut table = Table::new(
            "exponents.csv",
            &[
                ("trajectory", "-"),
                ("lambda1", "1/time"),
                ("lambda2", "1/time"),
                ("stderr1", "1/time"),
                ("stderr2", "1/time"),
                ("horizon", "time"),
            ],
        );
        let mut per_est: BTreeMap<String, Vec<ExponentEstimate>> = BTreeMap::new();
        let mut failed = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(o) => {
                    out.complete &= !o.halted;
                    out.timings.insert(format!("trajectory_{i:04}"), o.seconds);
                    for (name, ests) in &o.estimates {
                        for (j, e) in ests.iter().enumerate() {
                            let q = if ests.len() > 1 { format!("{name}{}", j + 1) } else { name.to_string() };
                            out.batches.push(BatchStat {
                                trajectory: i,
                                quantity: q.clone(),
                                value: e.value,
                                stderr: e.stderr,
                                batches: e.batches,
                            });
                            per_est.entry(q).or_default().push(*e);
                        }
                    }
                    let qr = &o.estimates["qr"];
                    table.push(vec![
                        i.to_string(),
                        fmt_real(qr[0].value),
                        fmt_real(qr[1].value),
                        fmt_real(qr[0].stderr),
                        fmt_real(qr[1].stderr),
                        fmt_real(qr[0].horizon),
                    ]);
                }
                Err(e) if e.is_member_failure() => {
                    out.failures += 1;
                    failed.push(json!({ "trajectory": i, "error": e.to_string() }));
                }
                Err(e) => return Err(e),
            }
        }
        let pooled: BTreeMap<String, ExponentEstimate> = per_est.iter().map(|(k, v)| (k.clone(), pool(v))).collect();
        if let (Some(a), Some(b)) = (pooled.get("qr1"), pooled.get("qr2")) {
            table.push(vec![
                "pooled".into(),
                fmt_real(a.value),
                fmt_real(b.value),
                fmt_real(a.stderr),
                fmt_real(b.stderr),
                fmt_real(a.horizon),
            ]);
        }
        let mut checks = serde_json::Map::new();
        if let (Some(a), Some(b)) = (pooled.get("qr1"), pooled.get("qr2")) {
            let se = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
            let sum = a.value + b.value;
            checks.insert(
                "sum_exponents".into(),
                json!({ "value": sum, "combined_stderr": se, "within_3se": sum.abs() < 3.0 * se }),
            );
            checks.insert("lambda1_positive_95".into(), json!(a.ci95().0 > 0.0));
        }
        let tops: Vec<(&str, &ExponentEstimate)> = ["norm", "qr1", "projective"]
            .iter()
            .filter_map(|k| pooled.get(*k).map(|e| (*k, e)))
            .collect();
        let mut pairs = Vec::new();
        for i in 0..tops.len() {
            for j in i + 1..tops.len() {
                let (a, b) = (tops[i].1, tops[j].1);
                let se = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
                let diff = a.value - b.value;
                pairs.push(json!({
                    "a": tops[i].0, "b": tops[j].0, "difference": diff,
                    "combined_stderr": se, "within_2se": diff.abs() < 2.0 * se,
                }));
            }
        }
        if !pairs.is_empty() {
            checks.insert("estimator_agreement".into(), json!(pairs));
        }
        out.summary = json!({
            "trajectories": cfg.ensemble,
            "estimators": self.estimators,
            "pooled": pooled.iter().map(|(k, e)| (k.clone(), est_json(e))).collect::<serde_json::Map<_, _>>(),
            "checks": checks,
            "failed": failed,
        });
        let mut est_table = Table::new(
            "estimators.csv",
            &[("trajectory", "-"), ("estimator", "-"), ("value", "1/time"), ("stderr", "1/time"), ("batches", "-")],
        );
        for b in &out.batches {
            est_table.push(vec![
                b.trajectory.to_string(),
                b.quantity.clone(),
                fmt_real(b.value),
                fmt_real(b.stderr),
                b.batches.to_string(),
            ]);
        }
        out.tables = vec![table, est_table];
        Ok(out)
    }
}

// ---------------------------------------------------------------- malliavin

pub struct Malliavin;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResidualRow {
    ttilde: f64,
    rho_total: f64,
    jh_norm: f64,
    rho_low: f64,
    rho_high: f64,
    discrepancy: f64,
    cost_l2: f64,
}

struct MallRow {
    lambda_min: f64,
    cond: f64,
    residuals: Vec<Result<ResidualRow, String>>,
    seconds: f64,
}

/// Unit low-mode direction with `hv ⊥ v`.
fn random_low_direction(m: usize, v: [f64; 2], rng: &mut NoiseStream) -> LowModeVector {
    let mut h = LowModeVector {
        hu: (0..m).map(|_| rng.normal()).collect(),
        hx: [rng.normal(), rng.normal()],
        hv: [rng.normal(), rng.normal()],
    };
    h.project(v);
    let n = h.norm();
    h.hu.iter_mut().for_each(|a| *a /= n);
    h.hx = [h.hx[0] / n, h.hx[1] / n];
    h.hv = [h.hv[0] / n, h.hv[1] / n];
    h
}

fn malliavin_run(cfg: &ExperimentConfig, i: usize, state: SnsState) -> Result<MallRow, LabError> {
    let start = Instant::now();
    let solver = Solver::new(cfg.solver.clone(), cfg.forcing.clone())?;
    let mut d = SnsDriver::new(solver, state, NoiseStream::new(cfg.seed, MALL_PARENT + 1 + i as u64));
    let mut prng = NoiseStream::new(cfg.seed, MALL_PARTICLE + i as u64);
    let p = random_particle(&mut prng);
    let steps = (cfg.t0 / cfg.solver.dt).round() as usize;
    let rec = TrajectoryRecord::record(&mut d, p, steps)?;
    let mut mal = Mall::new(&rec, Box::new(FullModel));
    let t0 = rec.t0;
    let n = mal.assemble_n(t0 + cfg.tau0, t0 + cfg.t0, cfg.stride)?;
    let eig = n.eigen(mal.low());
    let mut residuals = Vec::new();
    if i < cfg.residual_runs {
        let low = mal.low().clone();
        let h = FullTangent::from_low(&low, &random_low_direction(low.m(), p.v, &mut prng));
        for &tt in &cfg.ttilde {
            let r = mal.residual(&h, t0 + cfg.tau0, t0 + cfg.tau0 + tt).map(|r| ResidualRow {
                ttilde: tt,
                rho_total: r.rho_total,
                jh_norm: r.jh_norm,
                rho_low: r.rho_low,
                rho_high: r.rho_high,
                discrepancy: r.discrepancy,
                cost_l2: r.cost_l2,
            });
            residuals.push(r.map_err(|e| e.to_string()));
        }
    }
    Ok(MallRow { lambda_min: eig.lambda_min, cond: eig.cond, residuals, seconds: elapsed(start) })
}

pub const TAIL_EPSILONS: [f64; 7] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

impl Experiment for Malliavin {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Malliavin
    }

    fn run(&self, cfg: &ExperimentConfig) -> Result<ExperimentOutput, LabError> {
        let t = Instant::now();
        let mut parent = burned_in(cfg, MALL_PARENT)?;
        let per = (cfg.branch_spacing / cfg.solver.dt).round().max(1.0) as usize;
        let mut states = Vec::with_capacity(cfg.ensemble);
        for _ in 0..cfg.ensemble {
            states.push(parent.state().clone());
            for _ in 0..per {
                parent.advance()?;
            }
        }
        let mut out = ExperimentOutput { complete: true, ..Default::default() };
        out.timings.insert("parent".into(), elapsed(t));
        let rows: Vec<Result<MallRow, LabError>> = states
            .into_par_iter()
            .enumerate()
            .map(|(i, s)| malliavin_run(cfg, i, s))
            .collect();

        let mut table = Table::new(
            "malliavin.csv",
            &[
                ("run", "-"),
                ("lambda_min", "time"),
                ("cond_N", "-"),
                ("rho_low", "-"),
                ("rho_high", "-"),
                ("cost_l2", "-"),
            ],
        );
        let mut rtable = Table::new(
            "residuals.csv",
            &[
                ("run", "-"),
                ("ttilde", "time"),
                ("rho_total", "-"),
                ("jh_norm", "-"),
                ("rho_low", "-"),
                ("rho_high", "-"),
                ("discrepancy", "-"),
                ("cost_l2", "-"),
            ],
        );
        let mut lmins = Vec::new();
        let mut failed = Vec::new();
        let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); cfg.ttilde.len()];
        let mut max_disc: f64 = 0.0;
        for (i, r) in rows.into_iter().enumerate() {
            let r = match r {
                Ok(r) => r,
                Err(e) if !e.is_member_failure() => return Err(e),
                Err(e) => {
                    out.failures += 1;
                    failed.push(json!({ "run": i, "error": e.to_string() }));
                    continue;
                }
            };
            out.timings.insert(format!("run_{i:04}"), r.seconds);
            lmins.push(r.lambda_min);
            out.batches.push(BatchStat {
                trajectory: i,
                quantity: "lambda_min".into(),
                value: r.lambda_min,
                stderr: 0.0,
                batches: 1,
            });
            let first = r.residuals.first().and_then(|x| x.as_ref().ok());
            let cell = |f: fn(&ResidualRow) -> f64| first.map(|x| fmt_real(f(x))).unwrap_or_default();
            table.push(vec![
                i.to_string(),
                fmt_real(r.lambda_min),
                fmt_real(r.cond),
                cell(|x| x.rho_low),
                cell(|x| x.rho_high),
                cell(|x| x.cost_l2),
            ]);
            for (j, res) in r.residuals.iter().enumerate() {
                match res {
                    Ok(x) => {
                        ratios[j].push(x.rho_total / x.jh_norm);
                        max_disc = max_disc.max(x.discrepancy);
                        rtable.push(vec![
                            i.to_string(),
                            fmt_real(x.ttilde),
                            fmt_real(x.rho_total),
                            fmt_real(x.jh_norm),
                            fmt_real(x.rho_low),
                            fmt_real(x.rho_high),
                            fmt_real(x.discrepancy),
                            fmt_real(x.cost_l2),
                        ]);
                    }
                    Err(e) => failed.push(json!({ "run": i, "ttilde": cfg.ttilde[j], "error": e })),
                }
            }
        }
        let positive = lmins.iter().filter(|&&l| l > 0.0).count();
        let tail = min_eig_tail(&lmins, &TAIL_EPSILONS);
        let tail_monotone = tail.windows(2).all(|w| w[1].1 <= w[0].1);
        let means: Vec<f64> =
            ratios.iter().map(|r| if r.is_empty() { f64::NAN } else { r.iter().sum::<f64>() / r.len() as f64 }).collect();
        let decreasing = means.windows(2).all(|w| w[1] < w[0]);
        out.summary = json!({
            "runs": cfg.ensemble,
            "window": [cfg.tau0, cfg.t0],
            "positive_fraction": positive as f64 / lmins.len().max(1) as f64,
            "lambda_min_tail": tail.iter().map(|(e, p)| json!({ "epsilon": e, "fraction_below": p })).collect::<Vec<_>>(),
            "tail_monotone": tail_monotone,
            "residual_trend": cfg.ttilde.iter().zip(&means).zip(&ratios).map(|((tt, m), r)| json!({
                "ttilde": tt, "mean_rho_over_jh": m, "runs": r.len(),
            })).collect::<Vec<_>>(),
            "residual_decreasing": decreasing,
            "max_discrepancy": max_disc,
            "failed": failed,
        });
        out.tables = vec![table, rtable];
        Ok(out)
    }
}

// ----------------------------------------------------------------- spanning

pub struct Spanning;

pub fn unit_wavevectors() -> [WaveVector; 4] {
    [WaveVector { k1: 1, k2: 0 }, WaveVector { k1: 0, k2: 1 }, WaveVector { k1: -1, k2: 0 }, WaveVector { k1: 0, k2: -1 }]
}

impl Experiment for Spanning {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Spanning
    }

    fn run(&self, cfg: &ExperimentConfig) -> Result<ExperimentOutput, LabError> {
        let mut rng = NoiseStream::new(cfg.seed, SPANNING);
        let z0 = cfg.forcing.modes().to_vec();
        let unit = unit_wavevectors();
        let collinear = [WaveVector { k1: 1, k2: 0 }, WaveVector { k1: -1, k2: 0 }, WaveVector { k1: 2, k2: 0 }, WaveVector { k1: -2, k2: 0 }];
        let mut table = Table::new("spanning.csv", &[("x1", "rad"), ("x2", "rad"), ("v_angle", "rad"), ("rank", "-")]);
        let (mut min_z0, mut min_unit, mut max_col) = (usize::MAX, usize::MAX, 0);
        let mut samples = Vec::with_capacity(cfg.ensemble);
        let mut ctx = BracketContext::new(&cfg.forcing, &cfg.solver);
        let m = ctx.low().m();
        for _ in 0..cfg.ensemble {
            let p = random_particle(&mut rng);
            let r = spanning_rank(p.x, p.v, &z0);
            min_z0 = min_z0.min(r);
            min_unit = min_unit.min(spanning_rank(p.x, p.v, &unit));
            max_col = max_col.max(spanning_rank(p.x, p.v, &collinear));
            table.push(vec![fmt_real(p.x[0]), fmt_real(p.x[1]), fmt_real(p.v[1].atan2(p.v[0])), r.to_string()]);
            samples.push((p.x, p.v, random_low_direction(m, p.v, &mut rng).to_dvector()));
        }
        let rest = ctx.lower_bound_check(&SpectralVelocity::zeros(cfg.solver.kmax), &samples);
        let t = Instant::now();
        let d = burned_in(cfg, SPANNING + 1)?;
        let moving = ctx.lower_bound_check(&d.state().u, &samples);
        let mut out = ExperimentOutput { complete: true, ..Default::default() };
        out.timings.insert("lower_bound".into(), elapsed(t));
        out.failures = usize::from(min_z0 < 3);
        out.summary = json!({
            "points": cfg.ensemble,
            "min_rank_forced_set": min_z0,
            "min_rank_unit_set": min_unit,
            "max_rank_collinear_set": max_col,
            "lower_bound_at_rest": rest,
            "lower_bound_burned_in": moving,
        });
        out.tables = vec![table];
        Ok(out)
    }
}

// ----------------------------------------------------------------- validate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, err: f64, tol: f64) -> OracleCheck {
    OracleCheck { name, passed: err < tol, detail: format!("{err:e} < {tol:e}") }
}

/// Fast analytic checks of the whole stack.
pub fn oracle_suite() -> Vec<OracleCheck> {
    let mut out = Vec::new();
    let cfg = SolverConfig::default();

    // Viscous decay of a single unforced mode.
    let k = WaveVector { k1: 1, k2: 0 };
    let mut solver = Solver::new(cfg.clone(), crate::solver::ForcingSpec::new(1, 5.5, 0.0).unwrap()).unwrap();
    let mut st = SnsState::zero(cfg.kmax);
    st.u.set(k, 1.0);
    let mut rng = NoiseStream::new(0, 0);
    let ok = solver.burn_in(&mut st, &mut rng, 1.0).is_ok();
    let want = (-cfg.nu).exp();
    out.push(check("single_mode_decay", if ok { (st.u.get(k) - want).abs() / want } else { f64::INFINITY }, 1e-10));

    // Incompressibility: det A_t = 1 along a frozen random field.
    let mut u = SpectralVelocity::zeros(6);
    let mut r = NoiseStream::new(5, 0);
    for k in u.modes().collect::<Vec<_>>() {
        u.set(k, r.normal() / (1.0 + k.norm_sq() as f64));
    }
    let mut d = crate::flow::StaticDriver::new(u.clone(), 1e-3);
    let mut p = ParticleState::new([0.4, 2.0], [1.0, 0.0]);
    let mut a = crate::flow::TangentMatrix::identity();
    for _ in 0..1000 {
        let (obs, next) = crate::lyapunov::particle_step(d.field(), p, 1e-3, 1);
        a.a = crate::flow::mat_mul(&obs.m, &a.a);
        p = next;
        let _ = d.advance();
    }
    out.push(check("volume_conservation", (a.det() - 1.0).abs(), 1e-6));

    // Closed-form bracket against central differences.
    let f: &BundleField<'_> = &|u, x, v| {
        let b = fbar_eval(u, x, v);
        (SpectralVelocity::zeros(u.kmax()), b.bx, b.bv)
    };
    let mut worst: f64 = 0.0;
    for &k in crate::solver::ForcingSpec::desk().modes() {
        let e = move |u: &SpectralVelocity, _: [f64; 2], _: [f64; 2]| {
            let mut d = SpectralVelocity::zeros(u.kmax());
            d.set(k, 1.0);
            (d, [0.0; 2], [0.0; 2])
        };
        let (x, v) = ([1.3, 0.2], normalize([0.3, 0.9]));
        let (_, bx, bv) = fd_bracket(&e, f, &u, x, v, 1e-4);
        let w = bracket_ek_fbar(x, v, k);
        let err = (bx[0] - w.bx[0]).abs().max((bx[1] - w.bx[1]).abs()).max((bv[0] - w.bv[0]).abs()).max((bv[1] - w.bv[1]).abs());
        worst = worst.max(err);
    }
    out.push(check("bracket_finite_difference", worst, 1e-6));

    // Spanning with the four unit wavevectors.
    let r = spanning_rank([0.7, 5.1], normalize([-0.2, 1.0]), &unit_wavevectors());
    out.push(OracleCheck { name: "spanning_rank", passed: r == 3, detail: format!("rank {r}") });

    // S inverts R on a short stretch of a moving trajectory.
    let mut s = Solver::new(cfg.clone(), crate::solver::ForcingSpec::desk()).unwrap();
    let mut st = SnsState::zero(cfg.kmax);
    let mut rng = NoiseStream::new(1, 0);
    let defect = s.burn_in(&mut st, &mut rng, 0.5).ok().and_then(|_| {
        let mut d = SnsDriver::new(s, st, rng);
        let rec = TrajectoryRecord::record(&mut d, ParticleState::new([1.0, 1.0], [0.0, 1.0]), 100).ok()?;
        let mut mal = Mall::new(&rec, Box::new(FullModel));
        mal.inverse_defect(rec.t0, rec.t0 + 0.1).ok()
    });
    out.push(check("inverse_propagator", defect.unwrap_or(f64::INFINITY), 1e-6));

    // Checkpoint bytes survive a round trip.
    let ck = Checkpoint {
        state: SnsState { u, t: 1.5 },
        seed: 1,
        stream: 2,
        counter: 3,
        particle: p,
        tangent: a,
        windows_done: 4,
        accumulators: vec![("norm".into(), vec![0.1, 0.2])],
    };
    let b = ck.to_bytes();
    let same = Checkpoint::from_bytes(&b).map(|c| c.to_bytes() == b).unwrap_or(false);
    out.push(OracleCheck { name: "checkpoint_round_trip", passed: same, detail: format!("{} bytes", b.len()) });

    // V(u) at a unit mode with σ = α = 1.
    let mut one = SpectralVelocity::zeros(2);
    one.set(k, 1.0);
    out.push(check("super_lyapunov_unit_mode", (super_lyapunov_v(&one, 1.0, 1.0) - 2.0).abs(), 1e-14));

    // Exponent of a constant hyperbolic gradient.
    let mut ad = crate::flow::AffineDriver::new(crate::flow::AffineField::gradient([[0.3, 0.0], [0.0, -0.3]]), 1e-3);
    let e = crate::lyapunov::top_exponent_norm(&mut ad, ParticleState::new([0.0; 2], [1.0, 1.0]), 100.0, 1.0);
    out.push(check("hyperbolic_exponent", e.map(|e| (e.value - 0.3).abs()).unwrap_or(f64::INFINITY), 1e-6));

    // The unit-mode bracket example.
    let b = bracket_ek_fbar([0.0; 2], [1.0, 0.0], k);
    out.push(check("bracket_example", (b.bv[1] + 1.0).abs() + b.bv[0].abs() + b.bx[0].abs() + b.bx[1].abs(), 1e-15));

    out
}

pub struct Validate;

impl Experiment for Validate {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Validate
    }

    fn run(&self, _cfg: &ExperimentConfig) -> Result<ExperimentOutput, LabError> {
        let t = Instant::now();
        let checks = oracle_suite();
        let mut table = Table::new("validate.csv", &[("check", "-"), ("passed", "-"), ("detail", "-")]);
        for c in &checks {
            table.push(vec![c.name.into(), c.passed.to_string(), c.detail.replace(',', ";")]);
        }
        let mut out = ExperimentOutput { complete: true, ..Default::default() };
        out.failures = checks.iter().filter(|c| !c.passed).count();
        out.timings.insert("suite".into(), elapsed(t));
        out.summary = json!({ "checks": checks });
        out.tables = vec![table];
        Ok(out)
    }
}
