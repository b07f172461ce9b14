//! Lagrangian particle, derivative cocycle and projective direction driven by
//! a velocity field that is frozen over each solver step.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::solver::{ForcingSpec, NoiseStream, SnsState, Solver, SolverConfig, SolverError};
use crate::spectral::{Hess2, Mat2, PointEvaluator, SpectralVelocity, Vec2};

const TWO_PI: f64 = 2.0 * PI;

/// Anything that can be evaluated pointwise with derivatives.
pub trait VelocityField: Send + Sync {
    fn velocity(&self, x: Vec2) -> Vec2 {
        self.jet(x).0
    }
    fn jet(&self, x: Vec2) -> (Vec2, Mat2);
    fn jet2(&self, x: Vec2) -> (Vec2, Mat2, Hess2);
}

impl VelocityField for PointEvaluator {
    fn velocity(&self, x: Vec2) -> Vec2 {
        PointEvaluator::velocity(self, x)
    }
    fn jet(&self, x: Vec2) -> (Vec2, Mat2) {
        PointEvaluator::jet(self, x)
    }
    fn jet2(&self, x: Vec2) -> (Vec2, Mat2, Hess2) {
        PointEvaluator::jet2(self, x)
    }
}

/// Test hook: `u(x) = c + m·x` with constant gradient `m` (not periodic).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineField {
    pub c: Vec2,
    pub m: Mat2,
}

impl AffineField {
    pub fn constant(c: Vec2) -> Self {
        Self { c, m: [[0.0; 2]; 2] }
    }
    pub fn gradient(m: Mat2) -> Self {
        Self { c: [0.0; 2], m }
    }
}

impl VelocityField for AffineField {
    fn jet(&self, x: Vec2) -> (Vec2, Mat2) {
        (add(self.c, mat_vec(&self.m, x)), self.m)
    }
    fn jet2(&self, x: Vec2) -> (Vec2, Mat2, Hess2) {
        let (u, m) = self.jet(x);
        (u, m, [[[0.0; 2]; 2]; 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    pub x: Vec2,
    pub v: Vec2,
}

impl ParticleState {
    pub fn new(x: Vec2, v: Vec2) -> Self {
        Self { x: wrap(x), v: normalize(v) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentMatrix {
    pub a: Mat2,
}

impl TangentMatrix {
    pub fn identity() -> Self {
        Self { a: IDENTITY }
    }
    pub fn det(&self) -> f64 {
        det(&self.a)
    }
}

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn axpy(a: Vec2, s: f64, b: Vec2) -> Vec2 {
    [a[0] + s * b[0], a[1] + s * b[1]]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn mat_vec(m: &Mat2, v: Vec2) -> Vec2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

#[inline]
pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

#[inline]
fn mat_axpy(a: &Mat2, s: f64, b: &Mat2) -> Mat2 {
    [
        [a[0][0] + s * b[0][0], a[0][1] + s * b[0][1]],
        [a[1][0] + s * b[1][0], a[1][1] + s * b[1][1]],
    ]
}

pub fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

pub fn normalize(v: Vec2) -> Vec2 {
    let n = norm(v);
    [v[0] / n, v[1] / n]
}

/// Largest singular value of a 2×2 matrix.
pub fn op_norm(m: &Mat2) -> f64 {
    let f2 = m[0][0].powi(2) + m[0][1].powi(2) + m[1][0].powi(2) + m[1][1].powi(2);
    let d = det(m);
    let disc = (f2 * f2 - 4.0 * d * d).max(0.0).sqrt();
    ((f2 + disc) / 2.0).sqrt()
}

/// Componentwise reduction to `[0, 2π)`.
pub fn wrap(x: Vec2) -> Vec2 {
    [x[0].rem_euclid(TWO_PI), x[1].rem_euclid(TWO_PI)]
}

/// Shortest representative of `a - b` on the torus.
pub fn torus_diff(a: Vec2, b: Vec2) -> Vec2 {
    let f = |d: f64| d - TWO_PI * (d / TWO_PI).round();
    [f(a[0] - b[0]), f(a[1] - b[1])]
}

/// `Π_v M v = Mv - ⟨v, Mv⟩ v`.
#[inline]
pub fn projective_drift(m: &Mat2, v: Vec2) -> Vec2 {
    let mv = mat_vec(m, v);
    axpy(mv, -dot(v, mv), v)
}

/// One RK4 substep of `x' = u(x)`, result wrapped.
pub fn advect(x: Vec2, u: &dyn VelocityField, dt: f64) -> Vec2 {
    let k1 = u.velocity(x);
    let k2 = u.velocity(axpy(x, 0.5 * dt, k1));
    let k3 = u.velocity(axpy(x, 0.5 * dt, k2));
    let k4 = u.velocity(axpy(x, dt, k3));
    wrap(rk4_combine(x, dt, [k1, k2, k3, k4]))
}

#[inline]
fn rk4_combine(y: Vec2, dt: f64, k: [Vec2; 4]) -> Vec2 {
    let s = dt / 6.0;
    [
        y[0] + s * (k[0][0] + 2.0 * k[1][0] + 2.0 * k[2][0] + k[3][0]),
        y[1] + s * (k[0][1] + 2.0 * k[1][1] + 2.0 * k[2][1] + k[3][1]),
    ]
}

/// RK4 for `A' = Du(x_t) A` along the same stages as [`advect`].
pub fn step_tangent(a: &TangentMatrix, u: &dyn VelocityField, x: Vec2, dt: f64) -> TangentMatrix {
    let rec = step_record(u, ParticleState { x, v: [1.0, 0.0] }, dt);
    TangentMatrix { a: mat_mul(&rec.m, &a.a) }
}

/// RK4 for `v' = Π_v Du(x_t) v`, then renormalised.
pub fn step_projective(v: Vec2, u: &dyn VelocityField, x: Vec2, dt: f64) -> Vec2 {
    step_record(u, ParticleState { x, v }, dt).next.v
}

/// Everything one particle step produces.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    /// One-step tangent map (RK4 applied to `A' = Du A` from the identity).
    pub m: Mat2,
    /// RK4 quadrature of `∫⟨v, Du v⟩ dt` over the step.
    pub growth: f64,
    /// RK4 stage points `(x_i, v_i)`; `v_i` are the unnormalised stage values.
    pub stages: [(Vec2, Vec2); 4],
    pub next: ParticleState,
}

/// Advance `(x, A, v)` together with four field evaluations.
pub fn step_record(u: &dyn VelocityField, p: ParticleState, dt: f64) -> StepRecord {
    let h = 0.5 * dt;
    let (x1, v1, m1) = (p.x, p.v, IDENTITY);
    let (u1, d1) = u.jet(x1);
    let (kv1, km1, r1) = (projective_drift(&d1, v1), mat_mul(&d1, &m1), rate(&d1, v1));

    let (x2, v2, m2) = (axpy(x1, h, u1), axpy(v1, h, kv1), mat_axpy(&m1, h, &km1));
    let (u2, d2) = u.jet(x2);
    let (kv2, km2, r2) = (projective_drift(&d2, v2), mat_mul(&d2, &m2), rate(&d2, v2));

    let (x3, v3, m3) = (axpy(x1, h, u2), axpy(v1, h, kv2), mat_axpy(&m1, h, &km2));
    let (u3, d3) = u.jet(x3);
    let (kv3, km3, r3) = (projective_drift(&d3, v3), mat_mul(&d3, &m3), rate(&d3, v3));

    let (x4, v4, m4) = (axpy(x1, dt, u3), axpy(v1, dt, kv3), mat_axpy(&m1, dt, &km3));
    let (u4, d4) = u.jet(x4);
    let (kv4, km4, r4) = (projective_drift(&d4, v4), mat_mul(&d4, &m4), rate(&d4, v4));

    let s = dt / 6.0;
    let mut m = IDENTITY;
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] += s * (km1[i][j] + 2.0 * km2[i][j] + 2.0 * km3[i][j] + km4[i][j]);
        }
    }
    let x = wrap(rk4_combine(x1, dt, [u1, u2, u3, u4]));
    let v = normalize(rk4_combine(v1, dt, [kv1, kv2, kv3, kv4]));
    StepRecord {
        m,
        growth: s * (r1 + 2.0 * r2 + 2.0 * r3 + r4),
        stages: [(x1, v1), (x2, v2), (x3, v3), (x4, v4)],
        next: ParticleState { x, v },
    }
}

/// `⟨v, Mv⟩/|v|²`: instantaneous growth rate of `|A v|`.
#[inline]
fn rate(m: &Mat2, v: Vec2) -> f64 {
    dot(v, mat_vec(m, v)) / dot(v, v)
}

/// Source of frozen velocity fields, one per solver interval `[t, t + dt)`.
pub trait Driver: Send {
    fn kind(&self) -> &'static str;
    fn dt(&self) -> f64;
    fn time(&self) -> f64;
    /// Field frozen over the current interval.
    fn field(&self) -> &dyn VelocityField;
    /// Spectral coefficients of the current field, when there are any.
    fn spectral(&self) -> Option<&SpectralVelocity>;
    fn advance(&mut self) -> Result<(), SolverError>;
}

/// The stochastic Navier–Stokes velocity.
pub struct SnsDriver {
    solver: Solver,
    state: SnsState,
    rng: NoiseStream,
    eval: PointEvaluator,
}

impl SnsDriver {
    pub fn new(solver: Solver, state: SnsState, rng: NoiseStream) -> Self {
        let eval = PointEvaluator::new(&state.u);
        Self { solver, state, rng, eval }
    }

    pub fn state(&self) -> &SnsState {
        &self.state
    }

    pub fn rng(&self) -> &NoiseStream {
        &self.rng
    }

    pub fn solver(&self) -> &Solver {
        &self.solver
    }

    pub fn solver_mut(&mut self) -> &mut Solver {
        &mut self.solver
    }

    pub fn into_parts(self) -> (Solver, SnsState, NoiseStream) {
        (self.solver, self.state, self.rng)
    }
}

impl Driver for SnsDriver {
    fn kind(&self) -> &'static str {
        "sns"
    }
    fn dt(&self) -> f64 {
        self.solver.config().dt
    }
    fn time(&self) -> f64 {
        self.state.t
    }
    fn field(&self) -> &dyn VelocityField {
        &self.eval
    }
    fn spectral(&self) -> Option<&SpectralVelocity> {
        Some(&self.state.u)
    }
    fn advance(&mut self) -> Result<(), SolverError> {
        self.solver.step(&mut self.state, &mut self.rng)?;
        self.eval.refresh(&self.state.u);
        Ok(())
    }
}

/// A spectral field that never changes.
pub struct StaticDriver {
    u: SpectralVelocity,
    eval: PointEvaluator,
    t: f64,
    dt: f64,
}

impl StaticDriver {
    pub fn new(u: SpectralVelocity, dt: f64) -> Self {
        let eval = PointEvaluator::new(&u);
        Self { u, eval, t: 0.0, dt }
    }
}

impl Driver for StaticDriver {
    fn kind(&self) -> &'static str {
        "static"
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn time(&self) -> f64 {
        self.t
    }
    fn field(&self) -> &dyn VelocityField {
        &self.eval
    }
    fn spectral(&self) -> Option<&SpectralVelocity> {
        Some(&self.u)
    }
    fn advance(&mut self) -> Result<(), SolverError> {
        self.t += self.dt;
        Ok(())
    }
}

/// Synthetic affine field with constant gradient.
pub struct AffineDriver {
    field: AffineField,
    t: f64,
    dt: f64,
}

impl AffineDriver {
    pub fn new(field: AffineField, dt: f64) -> Self {
        Self { field, t: 0.0, dt }
    }
}

impl Driver for AffineDriver {
    fn kind(&self) -> &'static str {
        "affine"
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn time(&self) -> f64 {
        self.t
    }
    fn field(&self) -> &dyn VelocityField {
        &self.field
    }
    fn spectral(&self) -> Option<&SpectralVelocity> {
        None
    }
    fn advance(&mut self) -> Result<(), SolverError> {
        self.t += self.dt;
        Ok(())
    }
}

/// Construction parameters shared by every registered driver.
#[derive(Debug, Clone)]
pub struct DriverSpec {
    pub solver: SolverConfig,
    pub forcing: ForcingSpec,
    pub seed: u64,
    pub stream: u64,
    pub initial: Option<SnsState>,
    pub affine: AffineField,
}

impl Default for DriverSpec {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            forcing: ForcingSpec::desk(),
            seed: 0,
            stream: 0,
            initial: None,
            affine: AffineField::constant([0.0; 2]),
        }
    }
}

pub type DriverCtor = fn(&DriverSpec) -> Result<Box<dyn Driver>, SolverError>;

/// Name → constructor table for trajectory drivers.
#[derive(Clone)]
pub struct DriverRegistry {
    ctors: BTreeMap<&'static str, DriverCtor>,
}

impl Default for DriverRegistry {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("sns", |s| {
            let solver = Solver::new(s.solver.clone(), s.forcing.clone())?;
            let state = s.initial.clone().unwrap_or_else(|| SnsState::zero(s.solver.kmax));
            Ok(Box::new(SnsDriver::new(solver, state, NoiseStream::new(s.seed, s.stream))))
        });
        r.register("static", |s| {
            let u = s.initial.as_ref().map(|st| st.u.clone()).unwrap_or_else(|| SpectralVelocity::zeros(s.solver.kmax));
            Ok(Box::new(StaticDriver::new(u, s.solver.dt)))
        });
        r.register("affine", |s| Ok(Box::new(AffineDriver::new(s.affine, s.solver.dt))));
        r
    }
}

impl DriverRegistry {
    pub fn register(&mut self, name: &'static str, ctor: DriverCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn build(&self, name: &str, spec: &DriverSpec) -> Result<Box<dyn Driver>, SolverError> {
        let ctor = self
            .ctors
            .get(name)
            .ok_or_else(|| SolverError::Config(format!("unknown driver '{name}'")))?;
        ctor(spec)
    }
}
