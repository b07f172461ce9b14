//! Stochastic Navier–Stokes integrator: exponential Euler–Maruyama in the
//! `γ_k e_k` coefficients, with the advection term evaluated
//! pseudo-spectrally in vorticity form on a dealiased grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::spectral::{
    coeffs_from_vorticity_hat, gamma, positive_modes, FftGrid, SpectralError, SpectralVelocity,
    WaveVector,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("non-finite coefficients at t = {t}: {detail}")]
    Blowup { t: f64, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub nu: f64,
    pub dt: f64,
    pub kmax: usize,
    pub gridsize: usize,
    pub dealias: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { nu: 0.05, dt: 1e-3, kmax: 21, gridsize: 64, dealias: 2.0 / 3.0 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.nu > 0.0) || !(self.dt > 0.0) {
            return Err(SolverError::Config("nu and dt must be positive".into()));
        }
        if self.kmax == 0 {
            return Err(SolverError::Config("kmax must be at least 1".into()));
        }
        // Quadratic products of |k|∞ <= kmax fields alias into retained modes
        // unless gridsize > 3·kmax.
        if self.gridsize <= 3 * self.kmax {
            return Err(SpectralError::Resolution {
                gridsize: self.gridsize,
                kmax: self.kmax,
                need: 3 * self.kmax + 1,
            }
            .into());
        }
        if self.mask_radius() < self.kmax {
            return Err(SolverError::Config(format!(
                "dealias fraction {} keeps only |k| <= {} on a {}-point grid, below kmax = {}",
                self.dealias,
                self.mask_radius(),
                self.gridsize,
                self.kmax
            )));
        }
        let bound = 10.0 / (self.nu * (self.kmax * self.kmax) as f64);
        if self.dt >= bound {
            return Err(SolverError::Config(format!("dt = {} exceeds sanity bound {}", self.dt, bound)));
        }
        Ok(())
    }

    /// Largest `|k|∞` kept by the dealiasing mask.
    pub fn mask_radius(&self) -> usize {
        (self.dealias * self.gridsize as f64 / 2.0 + 1e-9).floor() as usize
    }
}

/// `q_k = ε_f |k|^{-α}` on `Z_0 = {0 < |k| <= N*}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingSpec {
    pub nstar: usize,
    pub alpha: f64,
    pub amplitude: f64,
    modes: Vec<WaveVector>,
    qk: Vec<f64>,
}

impl ForcingSpec {
    pub fn new(nstar: usize, alpha: f64, amplitude: f64) -> Result<Self, SolverError> {
        if nstar == 0 {
            return Err(SolverError::Config("nstar must be at least 1".into()));
        }
        if !(alpha > 5.0) {
            return Err(SolverError::Config(format!("alpha = {alpha} must exceed 5")));
        }
        if !(amplitude >= 0.0) {
            return Err(SolverError::Config("forcing amplitude must be non-negative".into()));
        }
        let modes = forced_modes(nstar);
        let qk = modes.iter().map(|k| amplitude * k.norm().powf(-alpha)).collect();
        Ok(Self { nstar, alpha, amplitude, modes, qk })
    }

    /// Default desk forcing: `N* = 4`, `α = 5.5`, `ε_f = 0.25`.
    pub fn desk() -> Self {
        Self::new(4, 5.5, 0.25).expect("valid defaults")
    }

    /// `Z_0` in canonical order (lexicographic in `(k1, k2)`).
    pub fn modes(&self) -> &[WaveVector] {
        &self.modes
    }

    pub fn qk(&self) -> &[f64] {
        &self.qk
    }

    pub fn m(&self) -> usize {
        self.modes.len()
    }

    pub fn q(&self, k: WaveVector) -> Option<f64> {
        self.position(k).map(|i| self.qk[i])
    }

    pub fn position(&self, k: WaveVector) -> Option<usize> {
        self.modes.binary_search(&k).ok()
    }

    /// `E_0 = Σ q_k²`.
    pub fn e0(&self) -> f64 {
        self.qk.iter().map(|q| q * q).sum()
    }
}

/// `{0 < |k| <= nstar}` sorted lexicographically.
pub fn forced_modes(nstar: usize) -> Vec<WaveVector> {
    let n = nstar as i32;
    let mut out = Vec::new();
    for k1 in -n..=n {
        for k2 in -n..=n {
            let r2 = k1 * k1 + k2 * k2;
            if r2 > 0 && r2 <= n * n {
                out.push(WaveVector { k1, k2 });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnsState {
    pub u: SpectralVelocity,
    pub t: f64,
}

impl SnsState {
    pub fn zero(kmax: usize) -> Self {
        Self { u: SpectralVelocity::zeros(kmax), t: 0.0 }
    }
}

/// Counter-addressed Gaussian stream: `(seed, stream_id)` selects a ChaCha8
/// key/stream, `counter` is the 32-bit word position inside it.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::at(seed, stream_id, 0)
    }

    /// Reposition a stream at an arbitrary counter.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        rng.set_word_pos(counter as u128);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

/// Grid samples of a field needed by the advection operator: the packed
/// velocity `u1 + i u2` and the packed vorticity gradient `∂1ω + i ∂2ω`.
#[derive(Debug, Clone)]
pub struct AdvectionFields {
    vel: Vec<Complex64>,
    grad: Vec<Complex64>,
}

#[derive(Debug, Clone, Copy)]
struct ModeEntry {
    ip: usize,
    im: usize,
    sp: usize,
    sm: usize,
    g: [f64; 2],
    k: [f64; 2],
}

/// Pseudo-spectral advection on a fixed grid. `quadratic` returns
/// `-Leray(u·∇u)`, `symmetric` returns its polarisation
/// `-Leray(u·∇w + w·∇u)`; both are truncated to `kmax` (the 2/3 mask).
#[derive(Debug, Clone)]
pub struct Advection {
    kmax: usize,
    fft: FftGrid,
    buf: Vec<Complex64>,
    table: Vec<ModeEntry>,
}

impl Advection {
    pub fn new(kmax: usize, gridsize: usize) -> Self {
        let fft = FftGrid::new(gridsize);
        let proto = SpectralVelocity::zeros(kmax);
        let table = positive_modes(kmax)
            .map(|k| ModeEntry {
                ip: proto.index_of(k).unwrap(),
                im: proto.index_of(k.neg()).unwrap(),
                sp: fft.slot(k),
                sm: fft.slot(k.neg()),
                g: gamma(k),
                k: k.as_vec(),
            })
            .collect();
        Self { kmax, fft, buf: vec![Complex64::new(0.0, 0.0); gridsize * gridsize], table }
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    pub fn gridsize(&self) -> usize {
        self.fft.n()
    }

    pub fn fields(&mut self, u: &SpectralVelocity) -> AdvectionFields {
        let n = self.fft.n();
        let zero = Complex64::new(0.0, 0.0);
        let mut f = AdvectionFields { vel: vec![zero; n * n], grad: vec![zero; n * n] };
        self.fields_into(u, &mut f);
        f
    }

    /// As [`Advection::fields`], reusing the buffers of `out`.
    pub fn fields_into(&mut self, u: &SpectralVelocity, out: &mut AdvectionFields) {
        assert_eq!(u.kmax(), self.kmax, "field truncation must match the advection grid");
        let zero = Complex64::new(0.0, 0.0);
        out.vel.iter_mut().for_each(|z| *z = zero);
        out.grad.iter_mut().for_each(|z| *z = zero);
        let a = u.dense();
        for e in &self.table {
            let (ap, am) = (a[e.ip], a[e.im]);
            if ap == 0.0 && am == 0.0 {
                continue;
            }
            // i·ω̂(k) with ω̂(k) = (-a_k + i a_{-k})/2.
            let iw = Complex64::new(-0.5 * am, -0.5 * ap);
            let (u1, u2) = (iw * e.g[0], iw * e.g[1]);
            let (d1, d2) = (iw * e.k[0], iw * e.k[1]);
            // Pack X + iY with X̂(-k) = conj X̂(k).
            out.vel[e.sp] += Complex64::new(u1.re - u2.im, u1.im + u2.re);
            out.vel[e.sm] += Complex64::new(u1.re + u2.im, -u1.im + u2.re);
            out.grad[e.sp] += Complex64::new(d1.re - d2.im, d1.im + d2.re);
            out.grad[e.sm] += Complex64::new(d1.re + d2.im, -d1.im + d2.re);
        }
        self.fft.synthesize_band(&mut out.vel, self.kmax);
        self.fft.synthesize_band(&mut out.grad, self.kmax);
    }

    fn finish_into(&mut self, out: &mut SpectralVelocity) {
        self.fft.analyze_real_band(&mut self.buf, self.kmax);
        let b = out.dense_mut();
        for e in &self.table {
            // The advection term's vorticity is -p̂.
            let (ap, am) = coeffs_from_vorticity_hat(-self.buf[e.sp]);
            b[e.ip] = ap;
            b[e.im] = am;
        }
    }

    pub fn quadratic(&mut self, f: &AdvectionFields) -> SpectralVelocity {
        let mut out = SpectralVelocity::zeros(self.kmax);
        self.quadratic_into(f, &mut out);
        out
    }

    pub fn quadratic_into(&mut self, f: &AdvectionFields, out: &mut SpectralVelocity) {
        for (p, (v, g)) in self.buf.iter_mut().zip(f.vel.iter().zip(&f.grad)) {
            *p = Complex64::new(v.re * g.re + v.im * g.im, 0.0);
        }
        self.finish_into(out);
    }

    pub fn symmetric(&mut self, f: &AdvectionFields, g: &AdvectionFields) -> SpectralVelocity {
        let mut out = SpectralVelocity::zeros(self.kmax);
        self.symmetric_into(f, g, &mut out);
        out
    }

    pub fn symmetric_into(&mut self, f: &AdvectionFields, g: &AdvectionFields, out: &mut SpectralVelocity) {
        for (idx, p) in self.buf.iter_mut().enumerate() {
            let (uf, gf, ug, gg) = (f.vel[idx], f.grad[idx], g.vel[idx], g.grad[idx]);
            *p = Complex64::new(uf.re * gg.re + uf.im * gg.im + ug.re * gf.re + ug.im * gf.im, 0.0);
        }
        self.finish_into(out);
    }

    /// `-Leray(u·∇u)`.
    pub fn nonlinear(&mut self, u: &SpectralVelocity) -> SpectralVelocity {
        let f = self.fields(u);
        self.quadratic(&f)
    }
}

pub struct Solver {
    cfg: SolverConfig,
    forcing: ForcingSpec,
    adv: Advection,
    work: AdvectionFields,
    nl: SpectralVelocity,
    decay: Vec<f64>,
    noise: Vec<(usize, f64)>,
    nonlinear: bool,
}

impl std::fmt::Debug for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Solver").field("cfg", &self.cfg).field("nonlinear", &self.nonlinear).finish()
    }
}

impl Clone for Solver {
    fn clone(&self) -> Self {
        let mut s = Solver::new(self.cfg.clone(), self.forcing.clone()).expect("validated on first build");
        s.nonlinear = self.nonlinear;
        s
    }
}

impl Solver {
    pub fn new(cfg: SolverConfig, forcing: ForcingSpec) -> Result<Self, SolverError> {
        cfg.validate()?;
        if forcing.nstar > cfg.kmax {
            return Err(SolverError::Config(format!(
                "nstar = {} exceeds kmax = {}",
                forcing.nstar, cfg.kmax
            )));
        }
        let proto = SpectralVelocity::zeros(cfg.kmax);
        let mut decay = vec![0.0; proto.dense().len()];
        for k in proto.modes() {
            let lam = cfg.nu * k.norm_sq() as f64;
            decay[proto.index_of(k).unwrap()] = (-lam * cfg.dt).exp();
        }
        let noise = forcing
            .modes()
            .iter()
            .zip(forcing.qk())
            .map(|(&k, &q)| {
                let lam = cfg.nu * k.norm_sq() as f64;
                let sigma = (-(-2.0 * lam * cfg.dt).exp_m1() / (2.0 * lam)).sqrt();
                (proto.index_of(k).unwrap(), q * sigma)
            })
            .collect();
        let mut adv = Advection::new(cfg.kmax, cfg.gridsize);
        let work = adv.fields(&proto);
        Ok(Self { cfg, forcing, adv, work, nl: proto, decay, noise, nonlinear: true })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn forcing(&self) -> &ForcingSpec {
        &self.forcing
    }

    pub fn advection(&mut self) -> &mut Advection {
        &mut self.adv
    }

    /// Test hook: drop the advection term (pure Ornstein–Uhlenbeck modes).
    pub fn set_nonlinear(&mut self, enabled: bool) {
        self.nonlinear = enabled;
    }

    pub fn nonlinear_enabled(&self) -> bool {
        self.nonlinear
    }

    /// `e^{-ν|k|²dt}` per dense slot.
    pub fn decay_factors(&self) -> &[f64] {
        &self.decay
    }

    /// `(dense slot, q_k σ_k)` for each forced mode, in `Z_0` order.
    pub fn noise_gains(&self) -> &[(usize, f64)] {
        &self.noise
    }

    pub fn nonlinear_term(&mut self, u: &SpectralVelocity) -> SpectralVelocity {
        self.adv.nonlinear(u)
    }

    /// Deterministic half of a step: `e^{-ν|k|²dt}(a + dt·b(a))`.
    pub fn drift_step(&mut self, u: &SpectralVelocity) -> SpectralVelocity {
        let dt = self.cfg.dt;
        let mut out = u.clone();
        if self.nonlinear {
            self.adv.fields_into(u, &mut self.work);
            self.adv.quadratic_into(&self.work, &mut self.nl);
            out.axpy(dt, &self.nl);
        }
        for (a, e) in out.dense_mut().iter_mut().zip(&self.decay) {
            *a *= e;
        }
        out
    }

    pub fn step(&mut self, state: &mut SnsState, rng: &mut NoiseStream) -> Result<(), SolverError> {
        let mut u = self.drift_step(&state.u);
        let coeffs = u.dense_mut();
        for &(idx, gain) in &self.noise {
            debug_assert!(self.forcing.q(state.u.wave_of(idx)).is_some());
            coeffs[idx] += gain * rng.normal();
        }
        state.t += self.cfg.dt;
        if !u.is_finite() {
            return Err(SolverError::Blowup {
                t: state.t,
                detail: format!("enstrophy before step {}", enstrophy(&state.u)),
            });
        }
        state.u = u;
        Ok(())
    }

    pub fn burn_in(
        &mut self,
        state: &mut SnsState,
        rng: &mut NoiseStream,
        t_burn: f64,
    ) -> Result<(), SolverError> {
        let steps = (t_burn / self.cfg.dt).round() as u64;
        for _ in 0..steps {
            self.step(state, rng)?;
        }
        Ok(())
    }
}

/// Coefficient energy `Σ a_k²`.
pub fn energy(u: &SpectralVelocity) -> f64 {
    u.dense().iter().map(|a| a * a).sum()
}

/// `Σ |k|² a_k²`.
pub fn enstrophy(u: &SpectralVelocity) -> f64 {
    u.iter().map(|(k, a)| k.norm_sq() as f64 * a * a).sum()
}
