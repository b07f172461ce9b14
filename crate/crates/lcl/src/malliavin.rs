//! Low-mode propagators, the partial Malliavin matrix, the explicit control
//! and the residual diagnostics.
//!
//! Low space: forced modes `Z_0` plus the manifold variables `(x, v)`,
//! stored as `m + 4` reals `[hu; hx; hv]` with `hv` embedded in `R²` and
//! re-projected tangent to `v` after every step. High space: all other
//! retained modes.
//!
//! The recorded trajectory holds the velocity piecewise constant over each
//! solver step and keeps the particle RK4 stage points, so every linear
//! integration below uses the same frozen coefficients as the simulation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{dot, mat_vec, normalize, step_record, Driver, ParticleState, SnsDriver};
use crate::solver::{Advection, AdvectionFields, ForcingSpec, SolverConfig, SolverError};
use crate::spectral::{
    eval_basis, gamma, vorticity_hat, Hess2, Mat2, PointEvaluator, SpectralVelocity, Vec2, WaveVector,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MalliavinError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("time window [{s}, {t}] is outside the recorded trajectory or misaligned with dt")]
    Window { s: f64, t: f64 },
    #[error("non-degeneracy failure: smallest eigenvalue {eigenvalue:e}, condition number {cond:e}")]
    NonDegeneracy { eigenvalue: f64, cond: f64 },
    #[error("{0}")]
    Config(String),
}

/// Which parts of the linearisation are kept.
pub trait TangentModel: Send + Sync {
    fn name(&self) -> &'static str;
    /// `false` turns the whole linearised drift off (`L ≡ 0`).
    fn active(&self) -> bool {
        true
    }
    /// Whether the high modes feed the low block (`D_h F̂_l`).
    fn high_to_low(&self) -> bool {
        true
    }
}

pub struct FullModel;
pub struct DecoupledModel;
pub struct FrozenModel;

impl TangentModel for FullModel {
    fn name(&self) -> &'static str {
        "full"
    }
}

impl TangentModel for DecoupledModel {
    fn name(&self) -> &'static str {
        "decoupled"
    }
    fn high_to_low(&self) -> bool {
        false
    }
}

impl TangentModel for FrozenModel {
    fn name(&self) -> &'static str {
        "frozen"
    }
    fn active(&self) -> bool {
        false
    }
    fn high_to_low(&self) -> bool {
        false
    }
}

pub type ModelCtor = fn() -> Box<dyn TangentModel>;

#[derive(Clone)]
pub struct ModelRegistry {
    ctors: BTreeMap<&'static str, ModelCtor>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("full", || Box::new(FullModel));
        r.register("decoupled", || Box::new(DecoupledModel));
        r.register("frozen", || Box::new(FrozenModel));
        r
    }
}

impl ModelRegistry {
    pub fn register(&mut self, name: &'static str, ctor: ModelCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn build(&self, name: &str) -> Result<Box<dyn TangentModel>, MalliavinError> {
        self.ctors
            .get(name)
            .map(|c| c())
            .ok_or_else(|| MalliavinError::Config(format!("unknown tangent model '{name}'")))
    }
}

/// Index bookkeeping for the low space.
#[derive(Debug, Clone)]
pub struct LowSpace {
    modes: Vec<WaveVector>,
    q: Vec<f64>,
    lam: Vec<f64>,
    slots: Vec<usize>,
    kmax: usize,
}

impl LowSpace {
    pub fn new(forcing: &ForcingSpec, cfg: &SolverConfig) -> Self {
        let proto = SpectralVelocity::zeros(cfg.kmax);
        let modes = forcing.modes().to_vec();
        let slots = modes.iter().map(|&k| proto.index_of(k).expect("nstar <= kmax")).collect();
        let lam = modes.iter().map(|k| cfg.nu * k.norm_sq() as f64).collect();
        Self { modes, q: forcing.qk().to_vec(), lam, slots, kmax: cfg.kmax }
    }

    pub fn m(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.modes.len() + 4
    }

    pub fn modes(&self) -> &[WaveVector] {
        &self.modes
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    pub fn restrict(&self, u: &SpectralVelocity) -> Vec<f64> {
        self.slots.iter().map(|&i| u.dense()[i]).collect()
    }

    pub fn embed(&self, hu: &[f64]) -> SpectralVelocity {
        let mut u = SpectralVelocity::zeros(self.kmax);
        for (&i, &a) in self.slots.iter().zip(hu) {
            u.dense_mut()[i] = a;
        }
        u
    }

    /// `u` with the `Z_0` coefficients removed.
    pub fn high_part(&self, u: &SpectralVelocity) -> SpectralVelocity {
        let mut h = u.clone();
        for &i in &self.slots {
            h.dense_mut()[i] = 0.0;
        }
        h
    }

    /// `Q̂`: `q_k` on the u-block, zero on the manifold block.
    pub fn qhat(&self) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.dim(), self.m());
        for (j, &qk) in self.q.iter().enumerate() {
            q[(j, j)] = qk;
        }
        q
    }

    /// Identity except `I - v vᵀ` on the v-block.
    pub fn projector(&self, v: Vec2) -> DMatrix<f64> {
        let mut p = DMatrix::identity(self.dim(), self.dim());
        let o = self.m() + 2;
        for i in 0..2 {
            for j in 0..2 {
                p[(o + i, o + j)] -= v[i] * v[j];
            }
        }
        p
    }

    /// Orthonormal basis of the tangent subspace: u- and x-coordinates, then
    /// `(0, 0, v⊥)`.
    pub fn tangent_basis(&self, v: Vec2) -> DMatrix<f64> {
        let d = self.dim();
        let mut e = DMatrix::zeros(d, d - 1);
        for i in 0..d - 2 {
            e[(i, i)] = 1.0;
        }
        e[(d - 2, d - 2)] = -v[1];
        e[(d - 1, d - 2)] = v[0];
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowModeVector {
    pub hu: Vec<f64>,
    pub hx: Vec2,
    pub hv: Vec2,
}

impl LowModeVector {
    pub fn zeros(m: usize) -> Self {
        Self { hu: vec![0.0; m], hx: [0.0; 2], hv: [0.0; 2] }
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        let m = self.hu.len();
        let mut d = DVector::zeros(m + 4);
        d.rows_mut(0, m).copy_from_slice(&self.hu);
        d[m] = self.hx[0];
        d[m + 1] = self.hx[1];
        d[m + 2] = self.hv[0];
        d[m + 3] = self.hv[1];
        d
    }

    pub fn from_dvector(d: &DVector<f64>) -> Self {
        let m = d.len() - 4;
        Self { hu: d.rows(0, m).iter().copied().collect(), hx: [d[m], d[m + 1]], hv: [d[m + 2], d[m + 3]] }
    }

    /// Remove the component of `hv` along `v`.
    pub fn project(&mut self, v: Vec2) {
        let s = dot(self.hv, v);
        self.hv = [self.hv[0] - s * v[0], self.hv[1] - s * v[1]];
    }

    pub fn norm(&self) -> f64 {
        (self.hu.iter().map(|a| a * a).sum::<f64>() + dot(self.hx, self.hx) + dot(self.hv, self.hv)).sqrt()
    }
}

/// Tangent vector of the full state `(u, x, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullTangent {
    pub u: SpectralVelocity,
    pub x: Vec2,
    pub v: Vec2,
}

impl FullTangent {
    pub fn zeros(kmax: usize) -> Self {
        Self { u: SpectralVelocity::zeros(kmax), x: [0.0; 2], v: [0.0; 2] }
    }

    pub fn from_low(low: &LowSpace, h: &LowModeVector) -> Self {
        Self { u: low.embed(&h.hu), x: h.hx, v: h.hv }
    }

    pub fn low(&self, low: &LowSpace) -> LowModeVector {
        LowModeVector { hu: low.restrict(&self.u), hx: self.x, hv: self.v }
    }

    pub fn high(&self, low: &LowSpace) -> SpectralVelocity {
        low.high_part(&self.u)
    }

    pub fn norm(&self) -> f64 {
        (self.u.dot(&self.u) + dot(self.x, self.x) + dot(self.v, self.v)).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.u.scale(s);
        self.x = [self.x[0] * s, self.x[1] * s];
        self.v = [self.v[0] * s, self.v[1] * s];
    }

    pub fn axpy(&mut self, s: f64, other: &Self) {
        self.u.axpy(s, &other.u);
        for i in 0..2 {
            self.x[i] += s * other.x[i];
            self.v[i] += s * other.v[i];
        }
    }

    pub fn project(&mut self, v: Vec2) {
        let s = dot(self.v, v);
        self.v = [self.v[0] - s * v[0], self.v[1] - s * v[1]];
    }
}

/// A recorded stretch of the coupled `(u, x, v)` trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub cfg: SolverConfig,
    pub forcing: ForcingSpec,
    pub nonlinear: bool,
    pub t0: f64,
    /// `u_n`, `n = 0..=steps`.
    pub states: Vec<SpectralVelocity>,
    /// `(x_n, v_n)`, `n = 0..=steps`.
    pub particles: Vec<ParticleState>,
    /// Particle RK4 stage points of step `n`.
    pub stages: Vec<[(Vec2, Vec2); 4]>,
}

impl TrajectoryRecord {
    /// Advance `driver` by `steps` solver steps, carrying one particle.
    pub fn record(driver: &mut SnsDriver, particle: ParticleState, steps: usize) -> Result<Self, SolverError> {
        let cfg = driver.solver().config().clone();
        let forcing = driver.solver().forcing().clone();
        let nonlinear = driver.solver().nonlinear_enabled();
        let t0 = driver.time();
        let mut states = vec![driver.state().u.clone()];
        let mut particles = vec![particle];
        let mut stages = Vec::with_capacity(steps);
        let mut p = particle;
        for _ in 0..steps {
            let rec = step_record(driver.field(), p, cfg.dt);
            stages.push(rec.stages);
            p = rec.next;
            driver.advance()?;
            states.push(driver.state().u.clone());
            particles.push(p);
        }
        Ok(Self { cfg, forcing, nonlinear, t0, states, particles, stages })
    }

    pub fn steps(&self) -> usize {
        self.stages.len()
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt
    }

    /// Step index of absolute time `t`.
    pub fn index(&self, t: f64) -> Option<usize> {
        let r = (t - self.t0) / self.cfg.dt;
        let n = r.round();
        if (r - n).abs() > 1e-6 || n < 0.0 || n as usize > self.steps() {
            None
        } else {
            Some(n as usize)
        }
    }
}

/// `(x, v̂, Du(x), D²u(x))` at one RK4 stage.
#[derive(Debug, Clone, Copy)]
pub struct Geometry {
    pub x: Vec2,
    pub v: Vec2,
    pub du: Mat2,
    pub hess: Hess2,
}

impl Geometry {
    pub fn at(eval: &PointEvaluator, x: Vec2, v: Vec2) -> Self {
        let (_, du, hess) = eval.jet2(x);
        Self { x, v: normalize(v), du, hess }
    }
}

fn hess_dir(h: &Hess2, d: Vec2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = h[i][j][0] * d[0] + h[i][j][1] * d[1];
        }
    }
    out
}

fn proj(v: Vec2, w: Vec2) -> Vec2 {
    let s = dot(v, w);
    [w[0] - s * v[0], w[1] - s * v[1]]
}

fn vort(u: &SpectralVelocity, l: WaveVector) -> Complex64 {
    if (l.k1 == 0 && l.k2 == 0) || !u.contains(l) {
        return Complex64::new(0.0, 0.0);
    }
    if l.is_positive() {
        vorticity_hat(u.get(l), u.get(l.neg()))
    } else {
        vorticity_hat(u.get(l.neg()), u.get(l)).conj()
    }
}

/// Low-low block of `D B(u)`, `B(u) = -Leray(u·∇u)`, by direct convolution:
/// `ω̂_out(p) = Σ c(p-q, q) ω̂_u(p-q) ω̂_h(q)` with
/// `c(l, q) = (l2 q1 - l1 q2)(1/|l|² - 1/|q|²)`.
pub fn advection_low_matrix(low: &LowSpace, u: &SpectralVelocity) -> DMatrix<f64> {
    let m = low.m();
    let mut out = DMatrix::zeros(m, m);
    let pos = |k: WaveVector| low.modes.binary_search(&k).expect("Z_0 is symmetric");
    for (j, &qj) in low.modes.iter().enumerate() {
        let (r, wr) = if qj.is_positive() {
            (qj, Complex64::new(-0.5, 0.0))
        } else {
            (qj.neg(), Complex64::new(0.0, 0.5))
        };
        for &p in low.modes.iter().filter(|p| p.is_positive()) {
            let mut acc = Complex64::new(0.0, 0.0);
            for (s, ws) in [(r, wr), (r.neg(), wr.conj())] {
                let l = WaveVector { k1: p.k1 - s.k1, k2: p.k2 - s.k2 };
                if l.k1 == 0 && l.k2 == 0 {
                    continue;
                }
                let cross = (l.k2 * s.k1 - l.k1 * s.k2) as f64;
                let c = cross * (1.0 / l.norm_sq() as f64 - 1.0 / s.norm_sq() as f64);
                acc += vort(u, l) * ws * c;
            }
            out[(pos(p), j)] += -2.0 * acc.re;
            out[(pos(p.neg()), j)] += 2.0 * acc.im;
        }
    }
    out
}

/// Matrix of `L̃^l` at one stage; `conv` is [`advection_low_matrix`].
pub fn ltilde_matrix(low: &LowSpace, conv: &DMatrix<f64>, g: &Geometry) -> DMatrix<f64> {
    let m = low.m();
    let d = low.dim();
    let (xo, vo) = (m, m + 2);
    let mut l = DMatrix::zeros(d, d);
    l.view_mut((0, 0), (m, m)).copy_from(conv);
    for j in 0..m {
        l[(j, j)] -= low.lam[j];
    }
    let v = g.v;
    for (j, &k) in low.modes.iter().enumerate() {
        let gk = gamma(k);
        let e = eval_basis(k, g.x).expect("nonzero mode");
        let de = eval_basis(k.neg(), g.x).expect("nonzero mode");
        // D(γ_k e_k) v = γ_k (k·v) e_{-k}(x).
        let kv = k.k1 as f64 * v[0] + k.k2 as f64 * v[1];
        let pv = proj(v, [gk[0] * kv * de, gk[1] * kv * de]);
        l[(xo, j)] = gk[0] * e;
        l[(xo + 1, j)] = gk[1] * e;
        l[(vo, j)] = pv[0];
        l[(vo + 1, j)] = pv[1];
    }
    let mvv = dot(v, mat_vec(&g.du, v));
    for c in 0..2 {
        let mut ec = [0.0; 2];
        ec[c] = 1.0;
        let dx = mat_vec(&g.du, ec);
        l[(xo, xo + c)] = dx[0];
        l[(xo + 1, xo + c)] = dx[1];
        let hv = proj(v, mat_vec(&hess_dir(&g.hess, ec), v));
        l[(vo, xo + c)] = hv[0];
        l[(vo + 1, xo + c)] = hv[1];
        let vv = proj(v, [dx[0] - mvv * ec[0], dx[1] - mvv * ec[1]]);
        l[(vo, vo + c)] = vv[0];
        l[(vo + 1, vo + c)] = vv[1];
    }
    l
}

/// `L̃^l(u, x, v) h`, re-projected tangent to `v`.
pub fn ltilde_apply(low: &LowSpace, u: &SpectralVelocity, x: Vec2, v: Vec2, h: &LowModeVector) -> LowModeVector {
    let conv = advection_low_matrix(low, u);
    let g = Geometry::at(&PointEvaluator::new(u), x, v);
    let mut out = LowModeVector::from_dvector(&(ltilde_matrix(low, &conv, &g) * h.to_dvector()));
    out.project(g.v);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropagatorKind {
    R,
    S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowModePropagator {
    pub mat: DMatrix<f64>,
    pub s: f64,
    pub t: f64,
    pub kind: PropagatorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialMalliavinMatrix {
    pub mat: DMatrix<f64>,
    pub t0: f64,
    pub t1: f64,
    /// `v(τ₀)`, fixing the tangent subspace.
    pub v0: Vec2,
}

/// Spectrum of `N` restricted to the tangent subspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenSummary {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub cond: f64,
}

fn tangent_eigen(low: &LowSpace, mat: &DMatrix<f64>, v: Vec2) -> (SymmetricEigen<f64, nalgebra::Dyn>, DMatrix<f64>) {
    let e = low.tangent_basis(v);
    let mut r = e.transpose() * mat * &e;
    r = (&r + r.transpose()) * 0.5;
    (SymmetricEigen::new(r), e)
}

fn summarize(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> EigenSummary {
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    EigenSummary { lambda_min: lo, lambda_max: hi, cond: if lo > 0.0 { hi / lo } else { f64::INFINITY } }
}

impl PartialMalliavinMatrix {
    pub fn eigen(&self, low: &LowSpace) -> EigenSummary {
        summarize(&tangent_eigen(low, &self.mat, self.v0).0)
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.mat - self.mat.transpose()).abs().max()
    }

    /// `E (EᵀNE)⁻¹ Eᵀ` on the tangent subspace.
    pub fn pseudo_inverse(&self, low: &LowSpace) -> Result<DMatrix<f64>, MalliavinError> {
        tangent_inverse(low, &self.mat, self.v0)
    }
}

fn tangent_inverse(low: &LowSpace, mat: &DMatrix<f64>, v: Vec2) -> Result<DMatrix<f64>, MalliavinError> {
    let (eig, e) = tangent_eigen(low, mat, v);
    let s = summarize(&eig);
    if !(s.lambda_min > 0.0) || s.cond > 1e10 {
        return Err(MalliavinError::NonDegeneracy { eigenvalue: s.lambda_min, cond: s.cond });
    }
    let inv = eig.eigenvalues.map(|l| 1.0 / l);
    let ri = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    Ok(&e * ri * e.transpose())
}

/// Empirical `P(λ_min < ε)` for each `ε`.
pub fn min_eig_tail(lambda_mins: &[f64], epsilons: &[f64]) -> Vec<(f64, f64)> {
    let n = lambda_mins.len().max(1) as f64;
    epsilons
        .iter()
        .map(|&eps| (eps, lambda_mins.iter().filter(|&&l| l < eps).count() as f64 / n))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub tau0: f64,
    pub t1: f64,
    pub dt: f64,
    /// `g^l` at `τ₀ + n dt`.
    pub samples: Vec<Vec<f64>>,
    /// Trapezoidal `∫ ‖g‖² dt`.
    pub cost_l2: f64,
}

impl ControlPath {
    pub fn zeros(tau0: f64, t1: f64, dt: f64, m: usize) -> Self {
        let n = ((t1 - tau0) / dt).round() as usize;
        Self { tau0, t1, dt, samples: vec![vec![0.0; m]; n + 1], cost_l2: 0.0 }
    }

    /// `g^l_t`, zero before `τ₀` and after `T₀`.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let m = self.samples.first().map_or(0, |s| s.len());
        let r = (t - self.tau0) / self.dt;
        if r < -1e-9 || r > (self.samples.len() - 1) as f64 + 1e-9 {
            return vec![0.0; m];
        }
        self.samples[r.round() as usize].clone()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut c = self.clone();
        c.samples.iter_mut().flat_map(|g| g.iter_mut()).for_each(|a| *a *= s);
        c.cost_l2 *= s * s;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinResponse {
    pub zeta: LowModeVector,
    pub xi: SpectralVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub rho_low: f64,
    pub rho_high: f64,
    pub rho_total: f64,
    /// `‖J_{0,T₀}h‖`.
    pub jh_norm: f64,
    /// `‖Π_l J_{0,T₀}h‖`.
    pub jh_low_norm: f64,
    /// Relative gap between the direct and representation residuals.
    pub discrepancy: f64,
    pub cost_l2: f64,
    pub n_eigen: EigenSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianScheme {
    /// Exact tangent-linear map of the simulator's update.
    Discrete,
    /// RK4 of the linearised system with the step's frozen velocity.
    Rk4,
}

/// Low-space propagators over `[τ₀, T₀]` from one forward sweep.
#[derive(Debug, Clone)]
pub struct LowSweep {
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub n: DMatrix<f64>,
    /// `Π_{n+1} Q_n` per step, kept when requested.
    pub steps: Vec<DMatrix<f64>>,
    pub v0: Vec2,
    pub v1: Vec2,
    /// Condition number of `R` on the tangent subspace; above `1e12` the
    /// propagators are not trustworthy.
    pub r_cond: f64,
}

struct StepData {
    geo: [Geometry; 4],
    lmat: [DMatrix<f64>; 4],
    conv: DMatrix<f64>,
    fields: Option<AdvectionFields>,
    v_next: Vec2,
}

/// Linearised dynamics along a recorded trajectory.
pub struct Malliavin<'a> {
    rec: &'a TrajectoryRecord,
    low: LowSpace,
    adv: Advection,
    model: Box<dyn TangentModel>,
    lam: Vec<f64>,
    decay: Vec<f64>,
}

impl<'a> Malliavin<'a> {
    pub fn new(rec: &'a TrajectoryRecord, model: Box<dyn TangentModel>) -> Self {
        let low = LowSpace::new(&rec.forcing, &rec.cfg);
        let proto = SpectralVelocity::zeros(rec.cfg.kmax);
        let mut lam = vec![0.0; proto.dense().len()];
        for k in proto.modes() {
            lam[proto.index_of(k).unwrap()] = rec.cfg.nu * k.norm_sq() as f64;
        }
        let decay = lam.iter().map(|l| (-l * rec.cfg.dt).exp()).collect();
        let adv = Advection::new(rec.cfg.kmax, rec.cfg.gridsize);
        Self { rec, low, adv, model, lam, decay }
    }

    pub fn low(&self) -> &LowSpace {
        &self.low
    }

    pub fn model_name(&self) -> &'static str {
        self.model.name()
    }

    fn window(&self, s: f64, t: f64) -> Result<(usize, usize), MalliavinError> {
        match (self.rec.index(s), self.rec.index(t)) {
            (Some(a), Some(b)) if a <= b => Ok((a, b)),
            _ => Err(MalliavinError::Window { s, t }),
        }
    }

    fn v_at(&self, n: usize) -> Vec2 {
        self.rec.particles[n].v
    }

    fn step_data(&mut self, n: usize, with_fields: bool) -> StepData {
        let u = &self.rec.states[n];
        let eval = PointEvaluator::new(u);
        let st = &self.rec.stages[n];
        let geo = [0, 1, 2, 3].map(|i| Geometry::at(&eval, st[i].0, st[i].1));
        let conv = if self.rec.nonlinear && self.model.active() {
            advection_low_matrix(&self.low, u)
        } else {
            DMatrix::zeros(self.low.m(), self.low.m())
        };
        let lmat = geo.map(|g| {
            if self.model.active() {
                ltilde_matrix(&self.low, &conv, &g)
            } else {
                DMatrix::zeros(self.low.dim(), self.low.dim())
            }
        });
        let fields = (with_fields && self.rec.nonlinear && self.model.active()).then(|| self.adv.fields(u));
        StepData { geo, lmat, conv, fields, v_next: self.v_at(n + 1) }
    }

    /// Linearised drift of the full system at stage `i`.
    fn apply_full(&mut self, sd: &StepData, i: usize, y: &FullTangent) -> FullTangent {
        let mut out = FullTangent::zeros(self.low.kmax);
        if !self.model.active() {
            return out;
        }
        let hu = self.low.restrict(&y.u);
        let lv = LowModeVector { hu: hu.clone(), hx: y.x, hv: y.v }.to_dvector();
        let lo = &sd.lmat[i] * lv;
        for ((o, a), l) in out.u.dense_mut().iter_mut().zip(y.u.dense()).zip(&self.lam) {
            *o = -l * a;
        }
        let mut sym_low = vec![0.0; self.low.m()];
        if let Some(f) = &sd.fields {
            let fh = self.adv.fields(&y.u);
            let sym = self.adv.symmetric(f, &fh);
            out.u.axpy(1.0, &sym);
            sym_low = self.low.restrict(&sym);
        }
        let m = self.low.m();
        let coupling = self.model.high_to_low();
        let conv_hu = &sd.conv * DVector::from_column_slice(&hu);
        for j in 0..m {
            let slot = self.low.slots[j];
            let extra = if coupling { sym_low[j] - conv_hu[j] } else { 0.0 };
            out.u.dense_mut()[slot] = lo[j] + extra;
        }
        out.x = [lo[m], lo[m + 1]];
        out.v = [lo[m + 2], lo[m + 3]];
        if coupling {
            let g = &sd.geo[i];
            let (w, dw) = PointEvaluator::new(&self.low.high_part(&y.u)).jet(g.x);
            out.x = [out.x[0] + w[0], out.x[1] + w[1]];
            let pv = proj(g.v, mat_vec(&dw, g.v));
            out.v = [out.v[0] + pv[0], out.v[1] + pv[1]];
        }
        out
    }

    /// One RK4 step of the linearised full system, re-projected at `v_{n+1}`.
    fn rk4_full(&mut self, sd: &StepData, y: &FullTangent) -> FullTangent {
        let dt = self.rec.cfg.dt;
        let h = 0.5 * dt;
        let k1 = self.apply_full(sd, 0, y);
        let mut y2 = y.clone();
        y2.axpy(h, &k1);
        let k2 = self.apply_full(sd, 1, &y2);
        let mut y3 = y.clone();
        y3.axpy(h, &k2);
        let k3 = self.apply_full(sd, 2, &y3);
        let mut y4 = y.clone();
        y4.axpy(dt, &k3);
        let k4 = self.apply_full(sd, 3, &y4);
        let mut out = y.clone();
        let s = dt / 6.0;
        out.axpy(s, &k1);
        out.axpy(2.0 * s, &k2);
        out.axpy(2.0 * s, &k3);
        out.axpy(s, &k4);
        out.project(sd.v_next);
        out
    }

    /// Exact tangent-linear map of one simulator step (solver update plus
    /// particle RK4 with renormalisation).
    fn discrete_step(&mut self, n: usize, y: &FullTangent) -> FullTangent {
        let dt = self.rec.cfg.dt;
        let h = 0.5 * dt;
        let u = &self.rec.states[n];
        let base = PointEvaluator::new(u);
        let pert = PointEvaluator::new(&y.u);
        let st = self.rec.stages[n];
        let mut dx = [[0.0; 2]; 4];
        let mut dv = [[0.0; 2]; 4];
        let mut du = [[0.0; 2]; 4];
        let mut dkv = [[0.0; 2]; 4];
        let mut kv = [[0.0; 2]; 4];
        dx[0] = y.x;
        dv[0] = y.v;
        for i in 0..4 {
            if i > 0 {
                let c = if i == 3 { dt } else { h };
                dx[i] = [dx[0][0] + c * du[i - 1][0], dx[0][1] + c * du[i - 1][1]];
                dv[i] = [dv[0][0] + c * dkv[i - 1][0], dv[0][1] + c * dkv[i - 1][1]];
            }
            let (x, v) = st[i];
            let (_, d, hs) = base.jet2(x);
            let (w, dw) = pert.jet(x);
            let ddx = mat_vec(&d, dx[i]);
            du[i] = [w[0] + ddx[0], w[1] + ddx[1]];
            let hd = hess_dir(&hs, dx[i]);
            let dd = [[dw[0][0] + hd[0][0], dw[0][1] + hd[0][1]], [dw[1][0] + hd[1][0], dw[1][1] + hd[1][1]]];
            let dvv = mat_vec(&d, v);
            let r = dot(v, dvv);
            kv[i] = [dvv[0] - r * v[0], dvv[1] - r * v[1]];
            let a = mat_vec(&dd, v);
            let b = mat_vec(&d, dv[i]);
            let dr = dot(dv[i], dvv) + dot(v, a) + dot(v, b);
            dkv[i] = [
                a[0] + b[0] - dr * v[0] - r * dv[i][0],
                a[1] + b[1] - dr * v[1] - r * dv[i][1],
            ];
        }
        let s = dt / 6.0;
        let comb = |z: &[[f64; 2]; 4], j: usize| s * (z[0][j] + 2.0 * z[1][j] + 2.0 * z[2][j] + z[3][j]);
        let v1 = st[0].1;
        let vt = [v1[0] + comb(&kv, 0), v1[1] + comb(&kv, 1)];
        let nv = (vt[0] * vt[0] + vt[1] * vt[1]).sqrt();
        let vn = [vt[0] / nv, vt[1] / nv];
        let dvt = [dv[0][0] + comb(&dkv, 0), dv[0][1] + comb(&dkv, 1)];
        let pv = proj(vn, dvt);
        let mut out = FullTangent::zeros(self.low.kmax);
        out.x = [dx[0][0] + comb(&du, 0), dx[0][1] + comb(&du, 1)];
        out.v = [pv[0] / nv, pv[1] / nv];
        out.u = y.u.clone();
        if self.rec.nonlinear {
            let fu = self.adv.fields(u);
            let fh = self.adv.fields(&y.u);
            let sym = self.adv.symmetric(&fu, &fh);
            out.u.axpy(dt, &sym);
        }
        for (a, e) in out.u.dense_mut().iter_mut().zip(&self.decay) {
            *a *= e;
        }
        out
    }

    /// `J_{s,t} h`.
    pub fn jacobian_apply(
        &mut self,
        s: f64,
        t: f64,
        h: &FullTangent,
        scheme: JacobianScheme,
    ) -> Result<FullTangent, MalliavinError> {
        let (a, b) = self.window(s, t)?;
        let mut y = h.clone();
        for n in a..b {
            y = match scheme {
                JacobianScheme::Discrete => self.discrete_step(n, &y),
                JacobianScheme::Rk4 => {
                    let sd = self.step_data(n, true);
                    self.rk4_full(&sd, &y)
                }
            };
        }
        Ok(y)
    }

    /// RK4 products for `R' = L̃R` and `Y' = -Y L̃` over one step.
    fn step_matrices(&self, sd: &StepData) -> (DMatrix<f64>, DMatrix<f64>) {
        let dt = self.rec.cfg.dt;
        let h = 0.5 * dt;
        let d = self.low.dim();
        let id = DMatrix::<f64>::identity(d, d);
        let l = &sd.lmat;
        let k1 = l[0].clone();
        let k2 = &l[1] + &l[1] * &k1 * h;
        let k3 = &l[2] + &l[2] * &k2 * h;
        let k4 = &l[3] + &l[3] * &k3 * dt;
        let q = &id + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let p1 = -&l[0];
        let p2 = -(&l[1] + &p1 * &l[1] * h);
        let p3 = -(&l[2] + &p2 * &l[2] * h);
        let p4 = -(&l[3] + &p3 * &l[3] * dt);
        let p = &id + (p1 + p2 * 2.0 + p3 * 2.0 + p4) * (dt / 6.0);
        (q, p)
    }

    /// Forward sweep over `[τ₀, T₀]`: `R`, `S` and trapezoidal `N` sampled
    /// every `stride` steps.
    pub fn low_sweep(&mut self, tau0: f64, t1: f64, stride: usize, keep_steps: bool) -> Result<LowSweep, MalliavinError> {
        let (a, b) = self.window(tau0, t1)?;
        if stride == 0 || (b - a) % stride != 0 {
            return Err(MalliavinError::Config(format!("quadrature stride {stride} does not divide the window")));
        }
        let dt = self.rec.cfg.dt;
        let qhat = self.low.qhat();
        let v0 = self.v_at(a);
        let pi0 = self.low.projector(v0);
        let mut r = pi0.clone();
        let mut s = pi0;
        let mut n = DMatrix::zeros(self.low.dim(), self.low.dim());
        let mut steps = Vec::new();
        let add = |n: &mut DMatrix<f64>, s: &DMatrix<f64>, w: f64| {
            let sq = s * &qhat;
            *n += &sq * sq.transpose() * w;
        };
        add(&mut n, &s, 0.5 * stride as f64 * dt);
        for k in a..b {
            let sd = self.step_data(k, false);
            let (q, p) = self.step_matrices(&sd);
            let pi = self.low.projector(sd.v_next);
            let step = &pi * q;
            r = &step * r;
            s = s * p * pi;
            if keep_steps {
                steps.push(step);
            }
            let j = k + 1 - a;
            if j % stride == 0 {
                let w = if k + 1 == b { 0.5 } else { 1.0 };
                add(&mut n, &s, w * stride as f64 * dt);
            }
        }
        let sv = (&r * self.low.tangent_basis(v0)).singular_values();
        let lo = sv.min();
        let r_cond = if lo > 0.0 { sv.max() / lo } else { f64::INFINITY };
        Ok(LowSweep { r, s, n, steps, v0, v1: self.v_at(b), r_cond })
    }

    pub fn evolve_r(&mut self, s: f64, t: f64) -> Result<LowModePropagator, MalliavinError> {
        let sw = self.low_sweep(s, t, 1, false)?;
        Ok(LowModePropagator { mat: sw.r, s, t, kind: PropagatorKind::R })
    }

    pub fn evolve_s(&mut self, s: f64, t: f64) -> Result<LowModePropagator, MalliavinError> {
        let sw = self.low_sweep(s, t, 1, false)?;
        Ok(LowModePropagator { mat: sw.s, s, t, kind: PropagatorKind::S })
    }

    /// `‖(S R - I) E‖_F` on the tangent subspace at `s`.
    pub fn inverse_defect(&mut self, s: f64, t: f64) -> Result<f64, MalliavinError> {
        let sw = self.low_sweep(s, t, 1, false)?;
        let e = self.low.tangent_basis(sw.v0);
        Ok((&sw.s * &sw.r * &e - &e).norm())
    }

    pub fn assemble_n(&mut self, tau0: f64, t1: f64, stride: usize) -> Result<PartialMalliavinMatrix, MalliavinError> {
        let sw = self.low_sweep(tau0, t1, stride, false)?;
        Ok(PartialMalliavinMatrix { mat: sw.n, t0: tau0, t1, v0: sw.v0 })
    }

    /// Control steering the low block onto `target` (a vector in the low
    /// space at `T₀`). `g_n = (Φ_{n,T₀} Q̂)ᵀ M⁺ target` with the terminal
    /// Gram matrix `M = Σ w dt Φ_{n,T₀} Q̂ Q̂ᵀ Φ_{n,T₀}ᵀ` (`= R N Rᵀ`).
    pub fn control_for_target(
        &mut self,
        tau0: f64,
        t1: f64,
        target: &LowModeVector,
    ) -> Result<(ControlPath, EigenSummary), MalliavinError> {
        let sw = self.low_sweep(tau0, t1, 1, true)?;
        let n_eig = PartialMalliavinMatrix { mat: sw.n.clone(), t0: tau0, t1, v0: sw.v0 }.eigen(&self.low);
        if !(n_eig.lambda_min > 0.0) || n_eig.cond > 1e10 {
            return Err(MalliavinError::NonDegeneracy { eigenvalue: n_eig.lambda_min, cond: n_eig.cond });
        }
        let dt = self.rec.cfg.dt;
        let qhat = self.low.qhat();
        let d = self.low.dim();
        let steps = sw.steps.len();
        let mut phi = DMatrix::<f64>::identity(d, d);
        let mut fam = vec![DMatrix::zeros(d, self.low.m()); steps + 1];
        let mut gram = DMatrix::zeros(d, d);
        for n in (0..=steps).rev() {
            if n < steps {
                phi = phi * &sw.steps[n];
            }
            let f = &phi * &qhat;
            let w = if n == 0 || n == steps { 0.5 } else { 1.0 };
            gram += &f * f.transpose() * (w * dt);
            fam[n] = f;
        }
        let mut y = target.clone();
        y.project(sw.v1);
        let c = tangent_inverse(&self.low, &gram, sw.v1)? * y.to_dvector();
        let samples: Vec<Vec<f64>> = fam.iter().map(|f| (f.transpose() * &c).iter().copied().collect()).collect();
        let cost_l2 = samples
            .iter()
            .enumerate()
            .map(|(n, g)| {
                let w = if n == 0 || n == steps { 0.5 } else { 1.0 };
                w * dt * g.iter().map(|a| a * a).sum::<f64>()
            })
            .sum();
        Ok((ControlPath { tau0, t1, dt, samples, cost_l2 }, n_eig))
    }

    /// Control matching `Π_l J_{0,T₀} h`.
    pub fn build_control(&mut self, tau0: f64, t1: f64, h: &FullTangent) -> Result<ControlPath, MalliavinError> {
        let jh = self.jacobian_apply(self.rec.t0, t1, h, JacobianScheme::Rk4)?;
        Ok(self.control_for_target(tau0, t1, &jh.low(&self.low))?.0)
    }

    fn impulse(&self, y: &mut FullTangent, g: &[f64], w: f64) {
        for (j, &gj) in g.iter().enumerate() {
            y.u.dense_mut()[self.low.slots[j]] += w * self.low.q[j] * gj;
        }
    }

    /// `D^g` at `T₀` from zero data at `τ₀`, with the control entering as
    /// trapezoidal impulses at the step boundaries.
    pub fn malliavin_response(&mut self, g: &ControlPath) -> Result<MalliavinResponse, MalliavinError> {
        let (a, b) = self.window(g.tau0, g.t1)?;
        let dt = self.rec.cfg.dt;
        let mut y = FullTangent::zeros(self.low.kmax);
        for n in a..b {
            self.impulse(&mut y, &g.samples[n - a], 0.5 * dt);
            let sd = self.step_data(n, true);
            y = self.rk4_full(&sd, &y);
            self.impulse(&mut y, &g.samples[n + 1 - a], 0.5 * dt);
        }
        Ok(MalliavinResponse { zeta: y.low(&self.low), xi: y.high(&self.low) })
    }

    /// `D_h F̂_l ξ` at the start of step `n` (or the final state for
    /// `n = steps`).
    fn high_to_low_at(&mut self, n: usize, xi: &SpectralVelocity) -> LowModeVector {
        let mut out = LowModeVector::zeros(self.low.m());
        if !(self.model.active() && self.model.high_to_low()) {
            return out;
        }
        let u = &self.rec.states[n];
        let p = self.rec.particles[n];
        let v = normalize(p.v);
        if self.rec.nonlinear {
            let fu = self.adv.fields(u);
            let fx = self.adv.fields(xi);
            out.hu = self.low.restrict(&self.adv.symmetric(&fu, &fx));
        }
        let (w, dw) = PointEvaluator::new(xi).jet(p.x);
        out.hx = w;
        out.hv = proj(v, mat_vec(&dw, v));
        out
    }

    /// `ρ_{T₀} = J_{0,T₀}h - D^g` computed directly and through the
    /// representation formulas.
    pub fn residual(&mut self, h: &FullTangent, tau0: f64, t1: f64) -> Result<ResidualReport, MalliavinError> {
        let (a, b) = self.window(tau0, t1)?;
        let dt = self.rec.cfg.dt;
        let j_tau = self.jacobian_apply(self.rec.t0, tau0, h, JacobianScheme::Rk4)?;
        let j_end = self.jacobian_apply(tau0, t1, &j_tau, JacobianScheme::Rk4)?;
        let (g, n_eig) = self.control_for_target(tau0, t1, &j_end.low(&self.low))?;
        let sw = self.low_sweep(tau0, t1, 1, true)?;

        let mut d = FullTangent::zeros(self.low.kmax);
        let mut y = FullTangent::zeros(self.low.kmax);
        y.u = j_tau.high(&self.low);
        let mut jv = j_tau.clone();
        // Σ w dt S_n D_hF̂_l ξ_n, with S_n rebuilt alongside.
        let d_dim = self.low.dim();
        let mut s = self.low.projector(sw.v0);
        let mut acc = DVector::zeros(d_dim);
        let xi0 = d.high(&self.low);
        acc += &s * self.high_to_low_at(a, &xi0).to_dvector() * (0.5 * dt);
        for n in a..b {
            self.impulse(&mut d, &g.samples[n - a], 0.5 * dt);
            let sd = self.step_data(n, true);
            let mut w = jv.clone();
            w.axpy(-1.0, &d);
            w.u = self.low.embed(&self.low.restrict(&w.u));
            w.u.axpy(1.0, &y.u);
            // Co-integrate y' = L^h y + D_lF_h(Π_l J h - ζ) as the high part
            // of the full flow of w.
            let w_next = self.rk4_full(&sd, &w);
            d = self.rk4_full(&sd, &d);
            jv = self.rk4_full(&sd, &jv);
            y.u = w_next.high(&self.low);
            self.impulse(&mut d, &g.samples[n + 1 - a], 0.5 * dt);
            let (_, p) = self.step_matrices(&sd);
            s = s * p * self.low.projector(sd.v_next);
            let wgt = if n + 1 == b { 0.5 } else { 1.0 };
            let xi = d.high(&self.low);
            acc += &s * self.high_to_low_at(n + 1, &xi).to_dvector() * (wgt * dt);
        }
        let mut rho = jv.clone();
        rho.axpy(-1.0, &d);
        let rho_low = rho.low(&self.low);
        let rho_high = rho.high(&self.low);
        let mut rep_low = LowModeVector::from_dvector(&(-(&sw.r * acc)));
        rep_low.project(sw.v1);
        let mut rep = FullTangent::from_low(&self.low, &rep_low);
        rep.u.axpy(1.0, &y.u);
        let mut gap = rho.clone();
        gap.axpy(-1.0, &rep);
        let rho_total = rho.norm();
        Ok(ResidualReport {
            rho_low: rho_low.norm(),
            rho_high: rho_high.dot(&rho_high).sqrt(),
            rho_total,
            jh_norm: j_end.norm(),
            jh_low_norm: j_end.low(&self.low).norm(),
            discrepancy: if rho_total > 0.0 { gap.norm() / rho_total } else { gap.norm() },
            cost_l2: g.cost_l2,
            n_eigen: n_eig,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::projective_drift;
    use crate::solver::{NoiseStream, SnsState, Solver};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn low() -> LowSpace {
        LowSpace::new(&ForcingSpec::desk(), &SolverConfig::default())
    }

    fn random_field(kmax: usize, seed: u64, scale: f64) -> SpectralVelocity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = SpectralVelocity::zeros(kmax);
        for k in u.modes().collect::<Vec<_>>() {
            let r = k.norm();
            u.set(k, scale * (rng.random::<f64>() - 0.5) / (1.0 + r * r));
        }
        u
    }

    fn random_low(m: usize, v: Vec2, seed: u64) -> LowModeVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = LowModeVector {
            hu: (0..m).map(|_| rng.random::<f64>() - 0.5).collect(),
            hx: [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5],
            hv: [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5],
        };
        h.project(v);
        h
    }

    #[test]
    fn convolution_matches_pseudo_spectral_product() {
        let l = low();
        let u = random_field(21, 3, 4.0);
        let conv = advection_low_matrix(&l, &u);
        let mut adv = Advection::new(21, 64);
        let fu = adv.fields(&u);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hu: Vec<f64> = (0..l.m()).map(|_| rng.random::<f64>() - 0.5).collect();
        let fh = adv.fields(&l.embed(&hu));
        let want = l.restrict(&adv.symmetric(&fu, &fh));
        let got = &conv * DVector::from_column_slice(&hu);
        let scale = want.iter().map(|a| a.abs()).fold(0.0, f64::max);
        for j in 0..l.m() {
            assert!((got[j] - want[j]).abs() < 1e-12 * scale.max(1.0), "{j}: {} vs {}", got[j], want[j]);
        }
    }

    #[test]
    fn ltilde_at_rest_is_dissipation_plus_transport() {
        let l = low();
        let u = SpectralVelocity::zeros(21);
        let v = normalize([0.6, 0.8]);
        let x = [0.4, 2.0];
        let mut h = LowModeVector::zeros(l.m());
        let j = 7;
        h.hu[j] = 1.0;
        let out = ltilde_apply(&l, &u, x, v, &h);
        let k = l.modes()[j];
        for (i, a) in out.hu.iter().enumerate() {
            let want = if i == j { -0.05 * k.norm_sq() as f64 } else { 0.0 };
            assert!((a - want).abs() < 1e-15);
        }
        let g = gamma(k);
        let e = eval_basis(k, x).unwrap();
        assert!((out.hx[0] - g[0] * e).abs() < 1e-15 && (out.hx[1] - g[1] * e).abs() < 1e-15);
        let ed = eval_basis(k.neg(), x).unwrap();
        let kv = k.k1 as f64 * v[0] + k.k2 as f64 * v[1];
        let want = proj(v, [g[0] * kv * ed, g[1] * kv * ed]);
        assert!((out.hv[0] - want[0]).abs() < 1e-14 && (out.hv[1] - want[1]).abs() < 1e-14);
        assert_eq!(ltilde_apply(&l, &u, x, v, &LowModeVector::zeros(l.m())), LowModeVector::zeros(l.m()));
    }

    /// Low-block drift `(Π_l[-ν|k|²u + B(u)], u(x), Π_v Du(x) v)`.
    fn low_drift(l: &LowSpace, adv: &mut Advection, u: &SpectralVelocity, x: Vec2, v: Vec2) -> LowModeVector {
        let b = adv.nonlinear(u);
        let hu = l
            .modes()
            .iter()
            .map(|&k| -0.05 * k.norm_sq() as f64 * u.get(k) + b.get(k))
            .collect();
        let ev = PointEvaluator::new(u);
        let (w, d) = ev.jet(x);
        LowModeVector { hu, hx: w, hv: projective_drift(&d, v) }
    }

    #[test]
    fn ltilde_matches_finite_differences() {
        let l = low();
        let mut adv = Advection::new(21, 64);
        for seed in 0..4 {
            let u = random_field(21, 100 + seed, 6.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = [rng.random::<f64>() * 6.0, rng.random::<f64>() * 6.0];
            let v = normalize([rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]);
            let h = random_low(l.m(), v, 50 + seed);
            let got = ltilde_apply(&l, &u, x, v, &h);
            let delta = 1e-6;
            let shift = |s: f64| {
                let mut up = u.clone();
                up.axpy(s, &l.embed(&h.hu));
                let xp = [x[0] + s * h.hx[0], x[1] + s * h.hx[1]];
                let vp = [v[0] + s * h.hv[0], v[1] + s * h.hv[1]];
                (up, xp, vp)
            };
            let (up, xp, vp) = shift(delta);
            let (um, xm, vm) = shift(-delta);
            let fp = low_drift(&l, &mut adv, &up, xp, vp).to_dvector();
            let fm = low_drift(&l, &mut adv, &um, xm, vm).to_dvector();
            let mut fd = LowModeVector::from_dvector(&((fp - fm) / (2.0 * delta)));
            fd.project(v);
            let err = (got.to_dvector() - fd.to_dvector()).norm() / fd.to_dvector().norm();
            assert!(err < 1e-5, "seed {seed}: relative error {err}");
        }
    }

    fn record(seed: u64, burn: f64, steps: usize) -> TrajectoryRecord {
        let cfg = SolverConfig::default();
        let mut solver = Solver::new(cfg.clone(), ForcingSpec::desk()).unwrap();
        let mut st = SnsState::zero(cfg.kmax);
        let mut rng = NoiseStream::new(seed, 0);
        solver.burn_in(&mut st, &mut rng, burn).unwrap();
        let mut d = SnsDriver::new(solver, st, rng);
        TrajectoryRecord::record(&mut d, ParticleState::new([1.0, 2.0], normalize([1.0, 0.3])), steps).unwrap()
    }

    #[test]
    fn frozen_dynamics_give_block_diagonal_n() {
        let rec = record(1, 1.0, 100);
        let mut mal = Malliavin::new(&rec, Box::new(FrozenModel));
        let t0 = rec.t0;
        let n = mal.assemble_n(t0 + 0.02, t0 + 0.1, 1).unwrap();
        let m = mal.low().m();
        for i in 0..m + 4 {
            for j in 0..m + 4 {
                let want = if i == j && i < m { 0.08 * mal.low().q()[i].powi(2) } else { 0.0 };
                if i >= m || j >= m {
                    assert_eq!(n.mat[(i, j)], 0.0);
                } else {
                    assert!((n.mat[(i, j)] - want).abs() < 1e-15);
                }
            }
        }
        assert!(n.asymmetry() < 1e-12);
    }

    #[test]
    fn at_rest_r_is_heat_decay() {
        // Zero velocity and no noise: u stays 0.
        let cfg = SolverConfig::default();
        let solver = Solver::new(cfg.clone(), ForcingSpec::new(4, 5.5, 0.0).unwrap()).unwrap();
        let mut d = SnsDriver::new(solver, SnsState::zero(cfg.kmax), NoiseStream::new(0, 0));
        let rec = TrajectoryRecord::record(&mut d, ParticleState::new([0.5, 0.5], [1.0, 0.0]), 100).unwrap();
        let mut mal = Malliavin::new(&rec, Box::new(DecoupledModel));
        let r = mal.evolve_r(0.0, 0.1).unwrap();
        let l = mal.low().clone();
        for (j, k) in l.modes().iter().enumerate() {
            let want = (-0.05 * k.norm_sq() as f64 * 0.1).exp();
            assert!((r.mat[(j, j)] - want).abs() < 1e-12);
        }
        let id = mal.evolve_r(0.05, 0.05).unwrap();
        assert_eq!(id.mat, l.projector([1.0, 0.0]));
    }

    #[test]
    fn s_inverts_r() {
        let rec = record(2, 2.0, 500);
        let mut mal = Malliavin::new(&rec, Box::new(FullModel));
        let d = mal.inverse_defect(rec.t0 + 0.1, rec.t0 + 0.5).unwrap();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn discrete_jacobian_matches_common_noise_differences() {
        let cfg = SolverConfig::default();
        let mut solver = Solver::new(cfg.clone(), ForcingSpec::desk()).unwrap();
        let mut st = SnsState::zero(cfg.kmax);
        let mut rng = NoiseStream::new(5, 0);
        solver.burn_in(&mut st, &mut rng, 1.0).unwrap();
        let p0 = ParticleState::new([2.0, 1.0], normalize([0.2, 1.0]));
        let steps = 60;
        let run = |du: &SpectralVelocity, dx: Vec2, dv: Vec2, s: f64| {
            let mut sv = solver.clone();
            let mut state = st.clone();
            state.u.axpy(s, du);
            let mut r = rng.clone();
            let mut p = ParticleState { x: [p0.x[0] + s * dx[0], p0.x[1] + s * dx[1]], v: [p0.v[0] + s * dv[0], p0.v[1] + s * dv[1]] };
            for _ in 0..steps {
                p = step_record(&PointEvaluator::new(&state.u), p, cfg.dt).next;
                sv.step(&mut state, &mut r).unwrap();
            }
            (state.u, p)
        };
        let mut d = SnsDriver::new(solver.clone(), st.clone(), rng.clone());
        let rec = TrajectoryRecord::record(&mut d, p0, steps).unwrap();
        let mut mal = Malliavin::new(&rec, Box::new(FullModel));
        let h = FullTangent { u: random_field(21, 77, 1.0), x: [0.3, -0.2], v: proj(p0.v, [0.5, 0.1]) };
        let j = mal.jacobian_apply(rec.t0, rec.t0 + steps as f64 * cfg.dt, &h, JacobianScheme::Discrete).unwrap();
        let delta = 1e-6;
        let (up, pp) = run(&h.u, h.x, h.v, delta);
        let (um, pm) = run(&h.u, h.x, h.v, -delta);
        let mut fd = FullTangent::zeros(21);
        fd.u = up.clone();
        fd.u.axpy(-1.0, &um);
        fd.u.scale(0.5 / delta);
        let diff = crate::flow::torus_diff(pp.x, pm.x);
        fd.x = [diff[0] * 0.5 / delta, diff[1] * 0.5 / delta];
        fd.v = [(pp.v[0] - pm.v[0]) * 0.5 / delta, (pp.v[1] - pm.v[1]) * 0.5 / delta];
        let mut e = j.clone();
        e.axpy(-1.0, &fd);
        assert!(e.norm() / fd.norm() < 1e-6, "{}", e.norm() / fd.norm());
    }

    #[test]
    fn decoupled_control_matches_exactly() {
        let rec = record(3, 2.0, 300);
        let mut mal = Malliavin::new(&rec, Box::new(DecoupledModel));
        let t0 = rec.t0;
        let v = rec.particles[0].v;
        let mut h = FullTangent::from_low(mal.low(), &random_low(48, v, 4));
        h.scale(1.0 / h.norm());
        let rep = mal.residual(&h, t0 + 0.1, t0 + 0.3).unwrap();
        assert!(rep.rho_low / rep.jh_low_norm < 1e-8, "{rep:?}");
    }

    #[test]
    fn control_is_linear() {
        let rec = record(4, 2.0, 200);
        let mut mal = Malliavin::new(&rec, Box::new(FullModel));
        let t0 = rec.t0;
        let v = rec.particles[0].v;
        let h = FullTangent::from_low(mal.low(), &random_low(48, v, 5));
        let mut h2 = h.clone();
        h2.scale(2.0);
        let g1 = mal.build_control(t0 + 0.1, t0 + 0.2, &h).unwrap();
        let g2 = mal.build_control(t0 + 0.1, t0 + 0.2, &h2).unwrap();
        for (a, b) in g1.samples.iter().flatten().zip(g2.samples.iter().flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        let z = mal.build_control(t0 + 0.1, t0 + 0.2, &FullTangent::zeros(21)).unwrap();
        assert!(z.samples.iter().flatten().all(|a| *a == 0.0) && z.cost_l2 == 0.0);
        assert_eq!(g1.at(t0), vec![0.0; 48]);
    }

    #[test]
    fn tail_table() {
        let lm = [1e-3, 1e-5, 2e-7, 0.5];
        let t = min_eig_tail(&lm, &[1.0, 1e-2, 1e-4, 1e-6, 0.0]);
        assert_eq!(t.iter().map(|p| p.1).collect::<Vec<_>>(), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn registry_names() {
        assert_eq!(ModelRegistry::default().names(), vec!["decoupled", "frozen", "full"]);
    }
}
