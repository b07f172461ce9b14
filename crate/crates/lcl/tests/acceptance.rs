//! Acceptance criteria 1–14, one PASS/FAIL line each.
//!
//! `LCL_ACCEPTANCE_ONLY=1,8,13` restricts the run to the listed criteria;
//! the others print `SKIP`. Criteria 5–7 share one ensemble and so do 9–11.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use lcl::brackets::{bracket_ek_fbar, fbar_eval, fd_bracket, spanning_rank, BracketContext, BundleField};
use lcl::flow::{mat_mul, torus_diff, ParticleState, SnsDriver, TangentMatrix, Driver};
use lcl::lab::{run_with_threads, worker_count, ExperimentConfig, ExperimentKind};
use lcl::lyapunov::particle_step;
use lcl::malliavin::{
    DecoupledModel, FrozenModel, FullModel, FullTangent, JacobianScheme, LowModeVector, Malliavin, TrajectoryRecord,
};
use lcl::solver::{ForcingSpec, NoiseStream, SnsState, Solver, SolverConfig};
use lcl::spectral::{PointEvaluator, SpectralVelocity, Vec2, WaveVector};
use nalgebra::DVector;
use serde_json::Value;

type Outcome = Result<(bool, String), String>;

struct Report {
    only: Option<BTreeSet<usize>>,
    failed: usize,
}

impl Report {
    fn wants(&self, ns: &[usize]) -> bool {
        self.only.as_ref().is_none_or(|o| ns.iter().any(|n| o.contains(n)))
    }

    fn line(&mut self, n: usize, name: &str, out: Outcome, secs: f64) {
        let (tag, detail) = match out {
            Ok((true, d)) => ("PASS", d),
            Ok((false, d)) => ("FAIL", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            self.failed += 1;
        }
        println!("[{tag}] {n:>2} {name}: {detail} ({secs:.1} s)");
        let _ = std::io::stdout().flush();
    }

    fn skip(&self, n: usize, name: &str) {
        println!("[SKIP] {n:>2} {name}");
    }
}

fn scratch(tag: &str) -> PathBuf {
    let p = std::env::temp_dir().join(format!("lcl-acceptance-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&p);
    p
}

fn burned(seed: u64, stream: u64, t: f64) -> (Solver, SnsState, NoiseStream) {
    let cfg = SolverConfig::default();
    let mut solver = Solver::new(cfg.clone(), ForcingSpec::desk()).unwrap();
    let mut st = SnsState::zero(cfg.kmax);
    let mut rng = NoiseStream::new(seed, stream);
    solver.burn_in(&mut st, &mut rng, t).unwrap();
    (solver, st, rng)
}

fn random_unit_low(m: usize, v: Vec2, rng: &mut NoiseStream) -> LowModeVector {
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

fn random_particle(rng: &mut NoiseStream) -> ParticleState {
    let tau = 2.0 * std::f64::consts::PI;
    let x = [tau * rng.uniform(), tau * rng.uniform()];
    let th = tau * rng.uniform();
    ParticleState::new(x, [th.cos(), th.sin()])
}

// 1
fn single_mode_decay() -> Outcome {
    let cfg = SolverConfig::default();
    let k = WaveVector { k1: 1, k2: 0 };
    let mut solver = Solver::new(cfg.clone(), ForcingSpec::new(4, 5.5, 0.0).unwrap()).map_err(|e| e.to_string())?;
    let mut st = SnsState::zero(cfg.kmax);
    st.u.set(k, 1.0);
    solver.burn_in(&mut st, &mut NoiseStream::new(0, 0), 1.0).map_err(|e| e.to_string())?;
    let want = (-cfg.nu).exp();
    let err = (st.u.get(k) - want).abs() / want;
    Ok((err < 1e-10, format!("a(1) = {:.15}, relative error {err:.2e} < 1e-10", st.u.get(k))))
}

// 2
fn ou_variance() -> Outcome {
    let cfg = SolverConfig::default();
    let forcing = ForcingSpec::desk();
    let k = WaveVector { k1: 4, k2: 0 };
    let q = forcing.q(k).ok_or("mode not forced")?;
    let lam = cfg.nu * k.norm_sq() as f64;
    let target = q * q / (2.0 * lam);
    let mut solver = Solver::new(cfg.clone(), forcing).map_err(|e| e.to_string())?;
    solver.set_nonlinear(false);
    let mut st = SnsState::zero(cfg.kmax);
    let mut rng = NoiseStream::new(ExperimentConfig::default().seed, 0);
    // Ten relaxation times from rest before sampling.
    solver.burn_in(&mut st, &mut rng, 10.0 / lam).map_err(|e| e.to_string())?;
    let steps = 100_000;
    let nb = 20;
    let per = steps / nb;
    let mut batch = Vec::with_capacity(nb);
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..nb {
        let mut acc = 0.0;
        for _ in 0..per {
            solver.step(&mut st, &mut rng).map_err(|e| e.to_string())?;
            let a = st.u.get(k);
            acc += a * a;
            s1 += a;
            s2 += a * a;
        }
        batch.push(acc / per as f64);
    }
    let n = steps as f64;
    let var = s2 / n - (s1 / n).powi(2);
    let m = batch.iter().sum::<f64>() / nb as f64;
    let se = (batch.iter().map(|b| (b - m).powi(2)).sum::<f64>() / ((nb - 1) * nb) as f64).sqrt();
    let z = (var - target) / se;
    Ok((z.abs() < 3.0, format!("mode (4,0): variance {var:.4e} vs q²/(2ν|k|²) = {target:.4e}, {z:+.2} stderr")))
}

// 3
fn volume_conservation() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..10u64 {
        let (solver, st, rng) = burned(300 + i, 0, 1.0);
        let mut d = SnsDriver::new(solver, st, rng);
        let mut p = random_particle(&mut NoiseStream::new(300 + i, 1));
        let mut a = TangentMatrix::identity();
        for _ in 0..1000 {
            let (obs, next) = particle_step(d.field(), p, d.dt(), 1);
            a.a = mat_mul(&obs.m, &a.a);
            p = next;
            d.advance().map_err(|e| e.to_string())?;
        }
        worst = worst.max((a.det() - 1.0).abs());
    }
    Ok((worst < 1e-6, format!("max |det A_1 - 1| over 10 trajectories = {worst:.2e} < 1e-6")))
}

// 4
fn jacobian_oracle() -> Outcome {
    let cfg = SolverConfig::default();
    let (solver, st, rng) = burned(404, 0, 2.0);
    let p0 = random_particle(&mut NoiseStream::new(404, 1));
    let steps = 250;
    let run = |h: &FullTangent, s: f64| {
        let mut sv = solver.clone();
        let mut state = st.clone();
        state.u.axpy(s, &h.u);
        let mut r = rng.clone();
        let mut p = ParticleState {
            x: [p0.x[0] + s * h.x[0], p0.x[1] + s * h.x[1]],
            v: [p0.v[0] + s * h.v[0], p0.v[1] + s * h.v[1]],
        };
        for _ in 0..steps {
            p = lcl::flow::step_record(&PointEvaluator::new(&state.u), p, cfg.dt).next;
            sv.step(&mut state, &mut r).unwrap();
        }
        (state.u, p)
    };
    let mut d = SnsDriver::new(solver.clone(), st.clone(), rng.clone());
    let rec = TrajectoryRecord::record(&mut d, p0, steps).map_err(|e| e.to_string())?;
    let mut mal = Malliavin::new(&rec, Box::new(FullModel));
    let mut hr = NoiseStream::new(404, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let mut h = FullTangent::zeros(cfg.kmax);
        for k in h.u.modes().collect::<Vec<_>>() {
            h.u.set(k, hr.normal() / (1.0 + k.norm_sq() as f64));
        }
        h.x = [hr.normal(), hr.normal()];
        h.v = [hr.normal(), hr.normal()];
        h.project(p0.v);
        h.scale(1.0 / h.norm());
        let j = mal
            .jacobian_apply(rec.t0, rec.t0 + 0.25, &h, JacobianScheme::Discrete)
            .map_err(|e| e.to_string())?;
        let delta = 1e-6;
        let (up, pp) = run(&h, delta);
        let (um, pm) = run(&h, -delta);
        let mut fd = FullTangent::zeros(cfg.kmax);
        fd.u = up;
        fd.u.axpy(-1.0, &um);
        fd.u.scale(0.5 / delta);
        let dx = torus_diff(pp.x, pm.x);
        fd.x = [dx[0] * 0.5 / delta, dx[1] * 0.5 / delta];
        fd.v = [(pp.v[0] - pm.v[0]) * 0.5 / delta, (pp.v[1] - pm.v[1]) * 0.5 / delta];
        let mut e = j;
        e.axpy(-1.0, &fd);
        worst = worst.max(e.norm() / fd.norm());
    }
    Ok((worst < 1e-4, format!("max relative error over 5 directions at t = 0.25: {worst:.2e} < 1e-4")))
}

// 5–7
fn lyapunov_ensemble() -> Result<Value, String> {
    let out = scratch("lyapunov");
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Lyapunov,
        ensemble: 16,
        horizon: 2000.0,
        output_path: out.clone(),
        ..Default::default()
    };
    let rec = run_with_threads(&cfg, worker_count()).map_err(|e| e.to_string())?;
    if rec.failures > 0 || !rec.complete {
        return Err(format!("{} trajectories failed: {}", rec.failures, rec.summary["failed"]));
    }
    let _ = std::fs::remove_dir_all(out);
    Ok(rec.summary)
}

fn est(s: &Value, k: &str) -> (f64, f64) {
    (s["pooled"][k]["value"].as_f64().unwrap_or(f64::NAN), s["pooled"][k]["stderr"].as_f64().unwrap_or(f64::NAN))
}

fn positivity(s: &Value) -> Outcome {
    let (l1, se) = est(s, "qr1");
    let lo = l1 - 1.96 * se;
    Ok((lo > 0.0, format!("pooled λ₁ = {l1:.4} ± {se:.4} (16 × 2000), 95% CI lower end {lo:.4} > 0")))
}

fn conservativity(s: &Value) -> Outcome {
    let (l1, s1) = est(s, "qr1");
    let (l2, s2) = est(s, "qr2");
    let se = (s1 * s1 + s2 * s2).sqrt();
    let sum = l1 + l2;
    Ok((sum.abs() < 3.0 * se, format!("|λ₁ + λ₂| = {:.2e} < 3 × {se:.2e}", sum.abs())))
}

fn agreement(s: &Value) -> Outcome {
    let names = ["norm", "qr1", "projective"];
    let mut ok = true;
    let mut parts = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, sa) = est(s, names[i]);
            let (b, sb) = est(s, names[j]);
            let se = (sa * sa + sb * sb).sqrt();
            ok &= (a - b).abs() < 2.0 * se;
            parts.push(format!("{}−{} {:.1e} (2se {:.1e})", names[i], names[j], (a - b).abs(), 2.0 * se));
        }
    }
    Ok((ok, parts.join(", ")))
}

// 8
fn inverse_identity() -> Outcome {
    let (solver, st, rng) = burned(808, 0, 20.0);
    let mut d = SnsDriver::new(solver, st, rng);
    let mut pr = NoiseStream::new(808, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        for _ in 0..1000 {
            d.advance().map_err(|e| e.to_string())?;
        }
        let rec = TrajectoryRecord::record(&mut d, random_particle(&mut pr), 500).map_err(|e| e.to_string())?;
        let mut mal = Malliavin::new(&rec, Box::new(FullModel));
        worst = worst.max(mal.inverse_defect(rec.t0 + 0.1, rec.t0 + 0.5).map_err(|e| e.to_string())?);
    }
    Ok((worst < 1e-6, format!("max ‖S R − I‖ on [0.1, 0.5] over 20 trajectories = {worst:.2e} < 1e-6")))
}

// 9–11
struct MalliavinEnsemble {
    summary: Value,
    lambda_mins: Vec<f64>,
}

fn malliavin_ensemble() -> Result<MalliavinEnsemble, String> {
    let out = scratch("malliavin");
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Malliavin,
        ensemble: 200,
        residual_runs: 50,
        output_path: out.clone(),
        ..Default::default()
    };
    let rec = run_with_threads(&cfg, worker_count()).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(out.join("malliavin.csv")).map_err(|e| e.to_string())?;
    let lambda_mins = csv
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(1).and_then(|x| x.parse().ok()).unwrap_or(f64::NAN))
        .collect();
    let _ = std::fs::remove_dir_all(out);
    Ok(MalliavinEnsemble { summary: rec.summary, lambda_mins })
}

fn frozen_is_singular() -> Result<(bool, String), String> {
    let (solver, st, rng) = burned(909, 0, 5.0);
    let mut d = SnsDriver::new(solver, st, rng);
    let rec = TrajectoryRecord::record(&mut d, random_particle(&mut NoiseStream::new(909, 1)), 500)
        .map_err(|e| e.to_string())?;
    let mut mal = Malliavin::new(&rec, Box::new(FrozenModel));
    let n = mal.assemble_n(rec.t0 + 0.1, rec.t0 + 0.5, 1).map_err(|e| e.to_string())?;
    let m = mal.low().m();
    let block = n.mat.view((m, m), (4, 4)).abs().max();
    let e = n.eigen(mal.low());
    let ok = block == 0.0 && e.lambda_min.abs() <= 1e-15 * e.lambda_max;
    Ok((ok, format!("frozen: manifold block max {block:e}, λ_min {:.1e}", e.lambda_min)))
}

fn nondegeneracy(m: &MalliavinEnsemble) -> Outcome {
    let pos = m.lambda_mins.iter().filter(|&&l| l > 0.0).count();
    let frac = pos as f64 / m.lambda_mins.len().max(1) as f64;
    let lo = m.lambda_mins.iter().copied().fold(f64::INFINITY, f64::min);
    let (frozen_ok, frozen) = frozen_is_singular()?;
    Ok((
        frac >= 0.99 && m.lambda_mins.len() == 200 && frozen_ok,
        format!("λ_min > 0 in {pos}/{} runs (min {lo:.3e}); {frozen}", m.lambda_mins.len()),
    ))
}

fn tail_monotone(m: &MalliavinEnsemble) -> Outcome {
    let eps = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
    let n = m.lambda_mins.len().max(1) as f64;
    let ccdf: Vec<f64> = eps.iter().map(|&e| m.lambda_mins.iter().filter(|&&l| l > e).count() as f64 / n).collect();
    let ok = ccdf.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = eps.iter().zip(&ccdf).map(|(e, c)| format!("{e:.0e}:{c:.3}")).collect();
    Ok((ok, format!("P(λ_min > ε) = [{}]", shown.join(" "))))
}

fn control_matching(m: &MalliavinEnsemble) -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..5u64 {
        let (solver, st, rng) = burned(1100 + i, 0, 5.0);
        let mut d = SnsDriver::new(solver, st, rng);
        let mut pr = NoiseStream::new(1100 + i, 1);
        let p = random_particle(&mut pr);
        let rec = TrajectoryRecord::record(&mut d, p, 500).map_err(|e| e.to_string())?;
        let mut mal = Malliavin::new(&rec, Box::new(DecoupledModel));
        let low = mal.low().clone();
        let h = FullTangent::from_low(&low, &random_unit_low(low.m(), p.v, &mut pr));
        let r = mal.residual(&h, rec.t0 + 0.1, rec.t0 + 0.5).map_err(|e| e.to_string())?;
        worst = worst.max(r.rho_low / r.jh_low_norm);
    }
    let trend = m.summary["residual_trend"].as_array().cloned().unwrap_or_default();
    let means: Vec<f64> = trend.iter().map(|t| t["mean_rho_over_jh"].as_f64().unwrap_or(f64::NAN)).collect();
    let runs: Vec<u64> = trend.iter().map(|t| t["runs"].as_u64().unwrap_or(0)).collect();
    let decreasing = means.len() == 3 && means.windows(2).all(|w| w[1] < w[0]) && runs.iter().all(|&r| r == 50);
    Ok((
        worst < 1e-8 && decreasing,
        format!(
            "decoupled max ρ_l/‖Π_l Jh‖ = {worst:.1e} < 1e-8; full mean ρ/‖Jh‖ at T̃₀ = 0.4/0.2/0.1: {:.4}/{:.4}/{:.4} over {:?} runs",
            means.first().copied().unwrap_or(f64::NAN),
            means.get(1).copied().unwrap_or(f64::NAN),
            means.get(2).copied().unwrap_or(f64::NAN),
            runs
        ),
    ))
}

// 12
fn spanning() -> Outcome {
    let k4 = [WaveVector { k1: 1, k2: 0 }, WaveVector { k1: 0, k2: 1 }, WaveVector { k1: -1, k2: 0 }, WaveVector { k1: 0, k2: -1 }];
    let col = [WaveVector { k1: 1, k2: 0 }, WaveVector { k1: -1, k2: 0 }, WaveVector { k1: 2, k2: 0 }, WaveVector { k1: -2, k2: 0 }];
    let mut rng = NoiseStream::new(1212, 0);
    let (mut min4, mut maxc) = (3, 0);
    for _ in 0..100 {
        let p = random_particle(&mut rng);
        min4 = min4.min(spanning_rank(p.x, p.v, &k4));
        maxc = maxc.max(spanning_rank(p.x, p.v, &col));
    }
    Ok((min4 == 3 && maxc <= 2, format!("min rank with ±e1, ±e2: {min4}; max rank with collinear set: {maxc}")))
}

// 13
fn short_time_error(dt: f64, u0: &SpectralVelocity, p0: ParticleState, ks: &[WaveVector]) -> Result<f64, String> {
    let cfg = SolverConfig { dt, ..SolverConfig::default() };
    let forcing = ForcingSpec::desk();
    let solver = Solver::new(cfg.clone(), forcing.clone()).map_err(|e| e.to_string())?;
    let st = SnsState { u: u0.clone(), t: 0.0 };
    let mut d = SnsDriver::new(solver, st, NoiseStream::new(1313, 5));
    let rec = TrajectoryRecord::record(&mut d, p0, 1).map_err(|e| e.to_string())?;
    let mut mal = Malliavin::new(&rec, Box::new(FullModel));
    let s1 = mal.evolve_s(rec.t0, rec.t0 + dt).map_err(|e| e.to_string())?.mat;
    let mut ctx = BracketContext::new(&forcing, &cfg);
    let m = forcing.m();
    let mut worst: f64 = 0.0;
    for &k in ks {
        let j = forcing.position(k).ok_or("unforced mode")?;
        let mut qk = DVector::zeros(m + 4);
        qk[j] = forcing.qk()[j];
        let drift = (&s1 * &qk - &qk) / dt;
        let ups = ctx.upsilon_q(u0, p0.x, p0.v, k).to_dvector();
        worst = worst.max((drift - &ups).norm() / ups.norm());
    }
    Ok(worst)
}

fn bracket_oracles() -> Outcome {
    let f: &BundleField<'_> = &|u, x, v| {
        let b = fbar_eval(u, x, v);
        (SpectralVelocity::zeros(u.kmax()), b.bx, b.bv)
    };
    let (_, st, _) = burned(1313, 0, 5.0);
    let mut rng = NoiseStream::new(1313, 1);
    let forcing = ForcingSpec::desk();
    let mut fd_worst: f64 = 0.0;
    for _ in 0..20 {
        let p = random_particle(&mut rng);
        for &k in forcing.modes() {
            let e = move |u: &SpectralVelocity, _: Vec2, _: Vec2| {
                let mut d = SpectralVelocity::zeros(u.kmax());
                d.set(k, 1.0);
                (d, [0.0; 2], [0.0; 2])
            };
            let (_, bx, bv) = fd_bracket(&e, f, &st.u, p.x, p.v, 1e-4);
            let w = bracket_ek_fbar(p.x, p.v, k);
            let err = [bx[0] - w.bx[0], bx[1] - w.bx[1], bv[0] - w.bv[0], bv[1] - w.bv[1]]
                .iter()
                .map(|d| d * d)
                .sum::<f64>()
                .sqrt();
            fd_worst = fd_worst.max(err);
        }
    }
    let p0 = random_particle(&mut rng);
    let ks: Vec<WaveVector> = forcing.modes().to_vec();
    let e1 = short_time_error(1e-3, &st.u, p0, &ks)?;
    let e2 = short_time_error(5e-4, &st.u, p0, &ks)?;
    let ratio = e1 / e2;
    Ok((
        fd_worst < 1e-6 && e1 < 5e-2 && (1.6..2.5).contains(&ratio),
        format!(
            "closed form vs FD bracket {fd_worst:.1e} < 1e-6 (48 modes × 20 points); Υ_lQ^k vs (S_dt Q^k − Q^k)/dt: {e1:.2e} at dt = 1e-3, {e2:.2e} at 5e-4 (ratio {ratio:.2})"
        ),
    ))
}

// 14
fn determinism() -> Outcome {
    let dirs = [scratch("det-a"), scratch("det-b"), scratch("det-c")];
    let base = |out: &PathBuf| ExperimentConfig {
        experiment: ExperimentKind::Lyapunov,
        ensemble: 3,
        horizon: 20.0,
        renorm_interval: 0.2,
        burn_in: 1.0,
        checkpoint_every: 4.0,
        output_path: out.clone(),
        ..Default::default()
    };
    run_with_threads(&base(&dirs[0]), 1).map_err(|e| e.to_string())?;
    run_with_threads(&base(&dirs[1]), 3).map_err(|e| e.to_string())?;
    let mut halted = base(&dirs[2]);
    halted.halt_after = 9.0;
    let h = run_with_threads(&halted, 2).map_err(|e| e.to_string())?;
    let mut resumed = base(&dirs[2]);
    resumed.resume = true;
    let r = run_with_threads(&resumed, 2).map_err(|e| e.to_string())?;
    let mut same = !h.complete && r.complete;
    for f in ["exponents.csv", "estimators.csv", "summary.json"] {
        let a = std::fs::read(dirs[0].join(f)).map_err(|e| e.to_string())?;
        same &= a == std::fs::read(dirs[1].join(f)).map_err(|e| e.to_string())?;
        same &= a == std::fs::read(dirs[2].join(f)).map_err(|e| e.to_string())?;
    }
    for d in &dirs {
        let _ = std::fs::remove_dir_all(d);
    }
    Ok((same, "outputs byte-identical for 1 vs 3 threads and across a halt at t = 9 / resume".into()))
}

fn main() -> ExitCode {
    let only = std::env::var("LCL_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect::<BTreeSet<usize>>());
    let mut rep = Report { only, failed: 0 };
    println!("acceptance: {} worker(s)", worker_count());

    let quick: [(usize, &str, fn() -> Outcome); 4] = [
        (1, "single-mode viscous decay", single_mode_decay),
        (2, "OU stationary variance", ou_variance),
        (3, "volume conservation", volume_conservation),
        (4, "Jacobian variational oracle", jacobian_oracle),
    ];
    for (n, name, f) in quick {
        if rep.wants(&[n]) {
            let t = Instant::now();
            let o = f();
            rep.line(n, name, o, t.elapsed().as_secs_f64());
        } else {
            rep.skip(n, name);
        }
    }

    let names57 = ["top exponent positivity", "conservativity", "estimator agreement"];
    if rep.wants(&[5, 6, 7]) {
        let t = Instant::now();
        let s = lyapunov_ensemble();
        let secs = t.elapsed().as_secs_f64();
        let checks: [fn(&Value) -> Outcome; 3] = [positivity, conservativity, agreement];
        for (i, c) in checks.iter().enumerate() {
            let o = s.as_ref().map_err(|e| e.clone()).and_then(c);
            rep.line(5 + i, names57[i], o, if i == 0 { secs } else { 0.0 });
        }
    } else {
        for (i, n) in names57.iter().enumerate() {
            rep.skip(5 + i, n);
        }
    }

    if rep.wants(&[8]) {
        let t = Instant::now();
        let o = inverse_identity();
        rep.line(8, "inverse-propagator identity", o, t.elapsed().as_secs_f64());
    } else {
        rep.skip(8, "inverse-propagator identity");
    }

    let names911 = ["partial Malliavin non-degeneracy", "spectral-tail monotonicity", "control matching"];
    if rep.wants(&[9, 10, 11]) {
        let t = Instant::now();
        let m = malliavin_ensemble();
        let checks: [fn(&MalliavinEnsemble) -> Outcome; 3] = [nondegeneracy, tail_monotone, control_matching];
        for (i, c) in checks.iter().enumerate() {
            let t0 = Instant::now();
            let o = m.as_ref().map_err(|e| e.clone()).and_then(c);
            let secs = if i == 0 { t.elapsed().as_secs_f64() } else { t0.elapsed().as_secs_f64() };
            rep.line(9 + i, names911[i], o, secs);
        }
    } else {
        for (i, n) in names911.iter().enumerate() {
            rep.skip(9 + i, n);
        }
    }

    let tail: [(usize, &str, fn() -> Outcome); 3] = [
        (12, "spanning condition", spanning),
        (13, "bracket oracles", bracket_oracles),
        (14, "determinism and resume-equivalence", determinism),
    ];
    for (n, name, f) in tail {
        if rep.wants(&[n]) {
            let t = Instant::now();
            let o = f();
            rep.line(n, name, o, t.elapsed().as_secs_f64());
        } else {
            rep.skip(n, name);
        }
    }

    if rep.failed > 0 {
        println!("acceptance: {} criterion line(s) failed", rep.failed);
        ExitCode::FAILURE
    } else {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    }
}
