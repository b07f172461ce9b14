//! Lyapunov exponents of the derivative cocycle `A_t = D_x x_t`.
//!
//! A single pass over a trajectory feeds any number of estimators; each sees
//! the one-step tangent maps and the projective growth quadrature and splits
//! time into renormalisation windows for batch-means error bars.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{mat_mul, op_norm, step_record, Driver, ParticleState, TangentMatrix, VelocityField, IDENTITY};
use crate::solver::SolverError;
use crate::spectral::Mat2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid estimator configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentEstimate {
    pub value: f64,
    pub stderr: f64,
    pub horizon: f64,
    pub batches: usize,
}

impl ExponentEstimate {
    /// Two-sided 95% normal interval.
    pub fn ci95(&self) -> (f64, f64) {
        (self.value - 1.96 * self.stderr, self.value + 1.96 * self.stderr)
    }
}

/// Average of independent per-trajectory estimates.
pub fn pool(estimates: &[ExponentEstimate]) -> ExponentEstimate {
    let n = estimates.len().max(1) as f64;
    ExponentEstimate {
        value: estimates.iter().map(|e| e.value).sum::<f64>() / n,
        stderr: estimates.iter().map(|e| e.stderr * e.stderr).sum::<f64>().sqrt() / n,
        horizon: estimates.iter().map(|e| e.horizon).sum(),
        batches: estimates.iter().map(|e| e.batches).sum(),
    }
}

/// Batch means over per-window increments of `log` growth, each window of
/// length `window`. Batches hold `⌊√n⌋` consecutive windows; a remainder is
/// used for the value but not for the error bar.
pub fn batch_means(increments: &[f64], window: f64, horizon: f64) -> ExponentEstimate {
    let n = increments.len();
    let value = increments.iter().sum::<f64>() / horizon;
    if n < 4 {
        return ExponentEstimate { value, stderr: 0.0, horizon, batches: n.min(1) };
    }
    let size = (n as f64).sqrt().floor() as usize;
    let nb = n / size;
    let means: Vec<f64> = (0..nb)
        .map(|b| increments[b * size..(b + 1) * size].iter().sum::<f64>() / (size as f64 * window))
        .collect();
    let m = means.iter().sum::<f64>() / nb as f64;
    let var = means.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (nb as f64 - 1.0);
    ExponentEstimate { value, stderr: (var / nb as f64).sqrt(), horizon, batches: nb }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovConfig {
    pub horizon: f64,
    pub renorm_interval: f64,
    /// Particle RK4 substeps per solver step.
    pub substeps: usize,
    pub overflow: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self { horizon: 2000.0, renorm_interval: 1.0, substeps: 1, overflow: 1e8 }
    }
}

impl LyapunovConfig {
    pub fn validate(&self) -> Result<(), LyapunovError> {
        if !(self.renorm_interval > 0.0) || self.substeps == 0 {
            return Err(LyapunovError::Config("renorm interval and substeps must be positive".into()));
        }
        if !(self.horizon >= 100.0 * self.renorm_interval) {
            return Err(LyapunovError::Config(format!(
                "horizon {} is shorter than 100 renormalisation intervals of {}",
                self.horizon, self.renorm_interval
            )));
        }
        if !(self.overflow > 1.0) {
            return Err(LyapunovError::Config("overflow guard must exceed 1".into()));
        }
        Ok(())
    }
}

/// What one solver step contributes to the cocycle.
#[derive(Debug, Clone, Copy)]
pub struct StepObservation {
    pub m: Mat2,
    pub growth: f64,
}

/// Advance a particle over one frozen-field interval in `substeps` RK4 steps.
pub fn particle_step(
    field: &dyn VelocityField,
    p: ParticleState,
    dt: f64,
    substeps: usize,
) -> (StepObservation, ParticleState) {
    let h = dt / substeps as f64;
    let mut m = IDENTITY;
    let mut growth = 0.0;
    let mut p = p;
    for _ in 0..substeps {
        let rec = step_record(field, p, h);
        m = mat_mul(&rec.m, &m);
        growth += rec.growth;
        p = rec.next;
    }
    (StepObservation { m, growth }, p)
}

/// A reducer over the cocycle of one trajectory.
pub trait ExponentEstimator: Send {
    fn name(&self) -> &'static str;
    fn observe(&mut self, obs: &StepObservation);
    /// Close the current renormalisation window.
    fn end_window(&mut self);
    /// Estimates in decreasing order (one for top-exponent estimators).
    fn finish(&self, window: f64, horizon: f64) -> Vec<ExponentEstimate>;
    /// Flat accumulator state for checkpoints.
    fn accumulators(&self) -> Vec<f64>;
    fn restore(&mut self, data: &[f64]) -> Result<(), LyapunovError>;
}

fn mat_from(d: &[f64]) -> Mat2 {
    [[d[0], d[1]], [d[2], d[3]]]
}

fn mat_flat(a: &Mat2) -> [f64; 4] {
    [a[0][0], a[0][1], a[1][0], a[1][1]]
}

fn bad_blob(name: &str) -> LyapunovError {
    LyapunovError::Config(format!("malformed accumulator state for '{name}'"))
}

fn scale(a: &Mat2, s: f64) -> Mat2 {
    [[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]]
}

/// `log‖A_t‖` with `A ← A/‖A‖` at each window end.
#[derive(Debug, Clone)]
pub struct NormGrowth {
    a: Mat2,
    overflow: f64,
    current: f64,
    windows: Vec<f64>,
}

impl NormGrowth {
    pub fn new(overflow: f64) -> Self {
        Self { a: IDENTITY, overflow, current: 0.0, windows: Vec::new() }
    }
}

impl ExponentEstimator for NormGrowth {
    fn name(&self) -> &'static str {
        "norm"
    }
    fn observe(&mut self, obs: &StepObservation) {
        self.a = mat_mul(&obs.m, &self.a);
        let n = op_norm(&self.a);
        if n > self.overflow {
            self.current += n.ln();
            self.a = scale(&self.a, 1.0 / n);
        }
    }
    fn end_window(&mut self) {
        let n = op_norm(&self.a);
        self.windows.push(self.current + n.ln());
        self.current = 0.0;
        self.a = scale(&self.a, 1.0 / n);
    }
    fn finish(&self, window: f64, horizon: f64) -> Vec<ExponentEstimate> {
        vec![batch_means(&self.windows, window, horizon)]
    }
    // [a (row-major), current, windows...]
    fn accumulators(&self) -> Vec<f64> {
        let mut d = mat_flat(&self.a).to_vec();
        d.push(self.current);
        d.extend_from_slice(&self.windows);
        d
    }
    fn restore(&mut self, data: &[f64]) -> Result<(), LyapunovError> {
        if data.len() < 5 {
            return Err(bad_blob(self.name()));
        }
        self.a = mat_from(data);
        self.current = data[4];
        self.windows = data[5..].to_vec();
        Ok(())
    }
}

/// Benettin-style accumulation: `A = QR`, keep `log|R_ii|`, restart from `Q`.
#[derive(Debug, Clone)]
pub struct QrSpectrum {
    a: Mat2,
    overflow: f64,
    current: [f64; 2],
    windows: Vec<[f64; 2]>,
}

impl QrSpectrum {
    pub fn new(overflow: f64) -> Self {
        Self { a: IDENTITY, overflow, current: [0.0; 2], windows: Vec::new() }
    }

    fn reorthonormalise(&mut self) {
        let (q, r) = qr2(&self.a);
        self.current[0] += r[0].ln();
        self.current[1] += r[1].ln();
        self.a = q;
    }
}

/// Gram–Schmidt QR of a 2×2 matrix by columns; returns `Q` and `(R11, R22)`
/// with both diagonal entries positive for invertible input.
pub fn qr2(a: &Mat2) -> (Mat2, [f64; 2]) {
    let c1 = [a[0][0], a[1][0]];
    let c2 = [a[0][1], a[1][1]];
    let r11 = (c1[0] * c1[0] + c1[1] * c1[1]).sqrt();
    let q1 = [c1[0] / r11, c1[1] / r11];
    let r12 = q1[0] * c2[0] + q1[1] * c2[1];
    let w = [c2[0] - r12 * q1[0], c2[1] - r12 * q1[1]];
    let r22 = (w[0] * w[0] + w[1] * w[1]).sqrt();
    let q2 = [w[0] / r22, w[1] / r22];
    ([[q1[0], q2[0]], [q1[1], q2[1]]], [r11, r22])
}

impl ExponentEstimator for QrSpectrum {
    fn name(&self) -> &'static str {
        "qr"
    }
    fn observe(&mut self, obs: &StepObservation) {
        self.a = mat_mul(&obs.m, &self.a);
        if op_norm(&self.a) > self.overflow {
            self.reorthonormalise();
        }
    }
    fn end_window(&mut self) {
        self.reorthonormalise();
        self.windows.push(self.current);
        self.current = [0.0; 2];
    }
    fn finish(&self, window: f64, horizon: f64) -> Vec<ExponentEstimate> {
        (0..2)
            .map(|i| {
                let inc: Vec<f64> = self.windows.iter().map(|w| w[i]).collect();
                batch_means(&inc, window, horizon)
            })
            .collect()
    }
    // [a (row-major), current (2), windows (pairs)...]
    fn accumulators(&self) -> Vec<f64> {
        let mut d = mat_flat(&self.a).to_vec();
        d.extend_from_slice(&self.current);
        d.extend(self.windows.iter().flatten());
        d
    }
    fn restore(&mut self, data: &[f64]) -> Result<(), LyapunovError> {
        if data.len() < 6 || data.len() % 2 != 0 {
            return Err(bad_blob(self.name()));
        }
        self.a = mat_from(data);
        self.current = [data[4], data[5]];
        self.windows = data[6..].chunks(2).map(|c| [c[0], c[1]]).collect();
        Ok(())
    }
}

/// Time average of `⟨v_t, Du_t(x_t) v_t⟩` along the projective process.
#[derive(Debug, Clone, Default)]
pub struct ProjectiveGrowth {
    current: f64,
    windows: Vec<f64>,
}

impl ExponentEstimator for ProjectiveGrowth {
    fn name(&self) -> &'static str {
        "projective"
    }
    fn observe(&mut self, obs: &StepObservation) {
        self.current += obs.growth;
    }
    fn end_window(&mut self) {
        self.windows.push(self.current);
        self.current = 0.0;
    }
    fn finish(&self, window: f64, horizon: f64) -> Vec<ExponentEstimate> {
        vec![batch_means(&self.windows, window, horizon)]
    }
    // [current, windows...]
    fn accumulators(&self) -> Vec<f64> {
        let mut d = vec![self.current];
        d.extend_from_slice(&self.windows);
        d
    }
    fn restore(&mut self, data: &[f64]) -> Result<(), LyapunovError> {
        let (&c, w) = data.split_first().ok_or_else(|| bad_blob(self.name()))?;
        self.current = c;
        self.windows = w.to_vec();
        Ok(())
    }
}

pub type EstimatorCtor = fn(&LyapunovConfig) -> Box<dyn ExponentEstimator>;

/// Name → constructor table for exponent estimators.
#[derive(Clone)]
pub struct EstimatorRegistry {
    ctors: BTreeMap<&'static str, EstimatorCtor>,
}

impl Default for EstimatorRegistry {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("norm", |c| Box::new(NormGrowth::new(c.overflow)));
        r.register("qr", |c| Box::new(QrSpectrum::new(c.overflow)));
        r.register("projective", |_| Box::new(ProjectiveGrowth::default()));
        r
    }
}

impl EstimatorRegistry {
    pub fn register(&mut self, name: &'static str, ctor: EstimatorCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn build(&self, name: &str, cfg: &LyapunovConfig) -> Result<Box<dyn ExponentEstimator>, LyapunovError> {
        self.ctors
            .get(name)
            .map(|c| c(cfg))
            .ok_or_else(|| LyapunovError::Config(format!("unknown estimator '{name}'")))
    }
}

/// Result of one pass: estimates keyed by estimator name.
#[derive(Debug, Clone)]
pub struct CocycleRun {
    pub estimates: BTreeMap<&'static str, Vec<ExponentEstimate>>,
    pub particle: ParticleState,
    pub horizon: f64,
}

/// A resumable pass over one trajectory: particle, the cocycle of the
/// current window, and the estimators fed by it.
pub struct Cocycle {
    pub particle: ParticleState,
    /// `A` accumulated since the last window end.
    pub tangent: TangentMatrix,
    pub estimators: Vec<Box<dyn ExponentEstimator>>,
    pub windows_done: usize,
    per_window: usize,
    windows: usize,
    dt: f64,
    substeps: usize,
}

impl Cocycle {
    pub fn new(
        dt: f64,
        particle: ParticleState,
        cfg: &LyapunovConfig,
        estimators: Vec<Box<dyn ExponentEstimator>>,
    ) -> Result<Self, LyapunovError> {
        cfg.validate()?;
        let per_window = (cfg.renorm_interval / dt).round().max(1.0) as usize;
        let windows = (cfg.horizon / (per_window as f64 * dt)).round() as usize;
        Ok(Self {
            particle,
            tangent: TangentMatrix::identity(),
            estimators,
            windows_done: 0,
            per_window,
            windows,
            dt,
            substeps: cfg.substeps,
        })
    }

    pub fn window(&self) -> f64 {
        self.per_window as f64 * self.dt
    }

    pub fn total_windows(&self) -> usize {
        self.windows
    }

    pub fn steps_per_window(&self) -> usize {
        self.per_window
    }

    pub fn is_done(&self) -> bool {
        self.windows_done >= self.windows
    }

    /// Run up to `n` further windows; returns how many ran.
    pub fn advance(&mut self, driver: &mut dyn Driver, n: usize) -> Result<usize, LyapunovError> {
        let n = n.min(self.windows - self.windows_done);
        for _ in 0..n {
            self.tangent = TangentMatrix::identity();
            for _ in 0..self.per_window {
                let (obs, next) = particle_step(driver.field(), self.particle, self.dt, self.substeps);
                self.tangent.a = mat_mul(&obs.m, &self.tangent.a);
                for e in self.estimators.iter_mut() {
                    e.observe(&obs);
                }
                self.particle = next;
                driver.advance()?;
            }
            for e in self.estimators.iter_mut() {
                e.end_window();
            }
            self.windows_done += 1;
        }
        Ok(n)
    }

    pub fn finish(&self) -> CocycleRun {
        let window = self.window();
        let horizon = self.windows_done as f64 * window;
        let estimates = self.estimators.iter().map(|e| (e.name(), e.finish(window, horizon))).collect();
        CocycleRun { estimates, particle: self.particle, horizon }
    }
}

/// Drive `estimators` along one trajectory for `cfg.horizon` time units.
pub fn run_cocycle(
    driver: &mut dyn Driver,
    particle: ParticleState,
    cfg: &LyapunovConfig,
    estimators: Vec<Box<dyn ExponentEstimator>>,
) -> Result<CocycleRun, LyapunovError> {
    let mut c = Cocycle::new(driver.dt(), particle, cfg, estimators)?;
    c.advance(driver, usize::MAX)?;
    Ok(c.finish())
}

fn single(
    driver: &mut dyn Driver,
    particle: ParticleState,
    cfg: &LyapunovConfig,
    name: &str,
) -> Result<Vec<ExponentEstimate>, LyapunovError> {
    let est = vec![EstimatorRegistry::default().build(name, cfg)?];
    let run = run_cocycle(driver, particle, cfg, est)?;
    Ok(run.estimates.into_values().next().unwrap_or_default())
}

pub fn top_exponent_norm(
    driver: &mut dyn Driver,
    particle: ParticleState,
    horizon: f64,
    renorm_interval: f64,
) -> Result<ExponentEstimate, LyapunovError> {
    let cfg = LyapunovConfig { horizon, renorm_interval, ..Default::default() };
    Ok(single(driver, particle, &cfg, "norm")?[0])
}

pub fn spectrum_qr(
    driver: &mut dyn Driver,
    particle: ParticleState,
    horizon: f64,
    renorm_interval: f64,
) -> Result<(ExponentEstimate, ExponentEstimate), LyapunovError> {
    let cfg = LyapunovConfig { horizon, renorm_interval, ..Default::default() };
    let v = single(driver, particle, &cfg, "qr")?;
    Ok((v[0], v[1]))
}

pub fn top_exponent_projective(
    driver: &mut dyn Driver,
    particle: ParticleState,
    horizon: f64,
) -> Result<ExponentEstimate, LyapunovError> {
    let cfg = LyapunovConfig { horizon, ..Default::default() };
    Ok(single(driver, particle, &cfg, "projective")?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{AffineDriver, AffineField};

    fn affine(m: Mat2) -> AffineDriver {
        AffineDriver::new(AffineField::gradient(m), 1e-3)
    }

    fn start() -> ParticleState {
        ParticleState::new([0.3, 1.1], [1.0, 0.0])
    }

    #[test]
    fn zero_field_gives_zero() {
        let mut d = affine([[0.0; 2]; 2]);
        assert_eq!(top_exponent_norm(&mut d, start(), 100.0, 1.0).unwrap().value, 0.0);
        let mut d = affine([[0.0; 2]; 2]);
        assert_eq!(top_exponent_projective(&mut d, start(), 100.0).unwrap().value, 0.0);
    }

    #[test]
    fn hyperbolic_closed_form() {
        let s = 0.3;
        let m = [[s, 0.0], [0.0, -s]];
        let e = top_exponent_norm(&mut affine(m), start(), 100.0, 1.0).unwrap();
        assert!((e.value - s).abs() < 1e-6, "{e:?}");
        assert!(e.stderr < 1e-9);
        let (l1, l2) = spectrum_qr(&mut affine(m), start(), 100.0, 1.0).unwrap();
        assert!((l1.value - s).abs() < 1e-6 && (l2.value + s).abs() < 1e-6);
        let p = top_exponent_projective(&mut affine(m), start(), 100.0).unwrap();
        assert!((p.value - s).abs() < 1e-6);
    }

    #[test]
    fn rotation_is_isometric() {
        let m = [[0.0, 1.0], [-1.0, 0.0]];
        let (l1, l2) = spectrum_qr(&mut affine(m), start(), 100.0, 1.0).unwrap();
        assert!(l1.value.abs() < 1e-8 && l2.value.abs() < 1e-8);
    }

    #[test]
    fn overflow_guard_keeps_the_estimate() {
        // e^{20·1} > 1e8 inside every window.
        let s = 20.0;
        let m = [[s, 0.0], [0.0, -s]];
        let e = top_exponent_norm(&mut affine(m), start(), 100.0, 1.0).unwrap();
        assert!((e.value - s).abs() / s < 1e-6, "{e:?}");
    }

    #[test]
    fn short_horizon_is_rejected() {
        let r = top_exponent_norm(&mut affine(IDENTITY), start(), 50.0, 1.0);
        assert!(matches!(r, Err(LyapunovError::Config(_))));
    }

    #[test]
    fn qr_factorisation() {
        let a = [[2.0, 1.0], [1.0, 3.0]];
        let (q, r) = qr2(&a);
        let back = mat_mul(&q, &[[r[0], (a[0][1] * q[0][0] + a[1][1] * q[1][0])], [0.0, r[1]]]);
        for i in 0..2 {
            for j in 0..2 {
                assert!((back[i][j] - a[i][j]).abs() < 1e-14);
            }
        }
        assert!((r[0] * r[1] - 5.0).abs() < 1e-13);
    }

    #[test]
    fn batch_means_of_constant_increments() {
        let e = batch_means(&vec![0.5; 100], 1.0, 100.0);
        assert_eq!(e.value, 0.5);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(e.batches, 10);
    }

    #[test]
    fn registry_names() {
        assert_eq!(EstimatorRegistry::default().names(), vec!["norm", "projective", "qr"]);
    }

    #[test]
    fn split_run_matches_single_pass() {
        let m = [[0.2, 0.5], [-0.1, -0.2]];
        let cfg = LyapunovConfig { horizon: 200.0, ..Default::default() };
        let reg = EstimatorRegistry::default();
        let build = || reg.names().iter().map(|n| reg.build(n, &cfg).unwrap()).collect::<Vec<_>>();
        let mut d = affine(m);
        let whole = run_cocycle(&mut d, start(), &cfg, build()).unwrap();
        let mut d = affine(m);
        let mut c = Cocycle::new(d.dt(), start(), &cfg, build()).unwrap();
        assert_eq!(c.advance(&mut d, 77).unwrap(), 77);
        let saved: Vec<Vec<f64>> = c.estimators.iter().map(|e| e.accumulators()).collect();
        let mut fresh = build();
        for (e, s) in fresh.iter_mut().zip(&saved) {
            e.restore(s).unwrap();
        }
        c.estimators = fresh;
        c.advance(&mut d, usize::MAX).unwrap();
        assert!(c.is_done());
        let split = c.finish();
        assert_eq!(split.estimates, whole.estimates);
        assert_eq!(split.particle, whole.particle);
        assert!(NormGrowth::new(1e8).restore(&[1.0]).is_err());
    }
}
