//! Real Fourier representation of divergence-free, mean-zero vector fields on
//! the torus `[0, 2π)²`.
//!
//! A field is stored as coefficients `a_k` over the basis `γ_k e_k`, where
//! `e_k = sin(k·x)` for `k ∈ Z²₊`, `e_k = cos(k·x)` for `k ∈ Z²₋`, and
//! `γ_k = (k2, -k1)/|k|²` (perpendicular convention `k⊥ = (-k2, k1)`).
//!
//! Useful identities: `∇e_k = k e_{-k}` for both signs of `k`, and
//! `curl(γ_k e_k) = ∓e_{-k}` for `k ∈ Z²₊` / `Z²₋`, so the `a_k` are
//! signed vorticity coefficients.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

pub type Vec2 = [f64; 2];
/// Row-major: `m[i][j] = ∂_j u_i`.
pub type Mat2 = [[f64; 2]; 2];
/// `h[i][j][l] = ∂_l ∂_j u_i`.
pub type Hess2 = [[[f64; 2]; 2]; 2];

const TWO_PI: f64 = 2.0 * PI;
/// `‖sin(k·x)‖²_{L²(T²)} = ‖cos(k·x)‖²_{L²(T²)}`.
pub const BASIS_SQ_NORM: f64 = 2.0 * PI * PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("wave vector (0, 0) is not part of the basis")]
    ZeroMode,
    #[error("grid of size {gridsize} cannot resolve kmax = {kmax} (need gridsize >= {need})")]
    Resolution { gridsize: usize, kmax: usize, need: usize },
    #[error("field has {got} samples, expected {expected}")]
    Shape { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WaveVector {
    pub k1: i32,
    pub k2: i32,
}

impl WaveVector {
    pub fn new(k1: i32, k2: i32) -> Result<Self, SpectralError> {
        if k1 == 0 && k2 == 0 {
            return Err(SpectralError::ZeroMode);
        }
        Ok(Self { k1, k2 })
    }

    /// `k ∈ Z²₊` iff `k2 > 0`, or `k1 > 0` and `k2 = 0`.
    pub fn is_positive(self) -> bool {
        self.k2 > 0 || (self.k1 > 0 && self.k2 == 0)
    }

    pub fn neg(self) -> Self {
        Self { k1: -self.k1, k2: -self.k2 }
    }

    pub fn norm_sq(self) -> i64 {
        let (a, b) = (self.k1 as i64, self.k2 as i64);
        a * a + b * b
    }

    pub fn norm(self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    pub fn norm_inf(self) -> u32 {
        self.k1.unsigned_abs().max(self.k2.unsigned_abs())
    }

    pub fn as_vec(self) -> Vec2 {
        [self.k1 as f64, self.k2 as f64]
    }

    pub fn dot(self, x: Vec2) -> f64 {
        self.k1 as f64 * x[0] + self.k2 as f64 * x[1]
    }
}

/// `e_k(x)`: `sin(k·x)` on `Z²₊`, `cos(k·x)` on `Z²₋`.
pub fn eval_basis(k: WaveVector, x: Vec2) -> Result<f64, SpectralError> {
    if k.k1 == 0 && k.k2 == 0 {
        return Err(SpectralError::ZeroMode);
    }
    let phase = k.dot(x);
    Ok(if k.is_positive() { phase.sin() } else { phase.cos() })
}

/// `γ_k = -k⊥/|k|² = (k2, -k1)/|k|²`.
pub fn gamma(k: WaveVector) -> Vec2 {
    let n2 = k.norm_sq() as f64;
    [k.k2 as f64 / n2, -(k.k1 as f64) / n2]
}

/// Dense storage over `-kmax..=kmax` in each index; the centre slot (k = 0)
/// is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVelocity {
    kmax: usize,
    coeffs: Vec<f64>,
}

impl SpectralVelocity {
    pub fn zeros(kmax: usize) -> Self {
        let w = 2 * kmax + 1;
        Self { kmax, coeffs: vec![0.0; w * w] }
    }

    /// Build from a dense coefficient vector laid out as `index_of`.
    pub fn from_dense(kmax: usize, coeffs: Vec<f64>) -> Self {
        let w = 2 * kmax + 1;
        assert_eq!(coeffs.len(), w * w, "dense coefficient length");
        let mut u = Self { kmax, coeffs };
        let c = u.center();
        u.coeffs[c] = 0.0;
        u
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    fn width(&self) -> usize {
        2 * self.kmax + 1
    }

    fn center(&self) -> usize {
        self.kmax * self.width() + self.kmax
    }

    pub fn contains(&self, k: WaveVector) -> bool {
        (k.norm_inf() as usize) <= self.kmax && !(k.k1 == 0 && k.k2 == 0)
    }

    /// Dense slot of `k`; `None` outside the truncation.
    pub fn index_of(&self, k: WaveVector) -> Option<usize> {
        if !self.contains(k) {
            return None;
        }
        let km = self.kmax as i32;
        Some(((k.k1 + km) as usize) * self.width() + (k.k2 + km) as usize)
    }

    pub fn wave_of(&self, idx: usize) -> WaveVector {
        let w = self.width();
        let km = self.kmax as i32;
        WaveVector { k1: (idx / w) as i32 - km, k2: (idx % w) as i32 - km }
    }

    pub fn get(&self, k: WaveVector) -> f64 {
        self.index_of(k).map_or(0.0, |i| self.coeffs[i])
    }

    /// Panics if `k` lies outside the truncation.
    pub fn set(&mut self, k: WaveVector, value: f64) {
        let i = self.index_of(k).expect("wave vector outside truncation");
        self.coeffs[i] = value;
    }

    pub fn dense(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn dense_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// All stored modes, in dense order.
    pub fn modes(&self) -> impl Iterator<Item = WaveVector> + '_ {
        let c = self.center();
        (0..self.coeffs.len()).filter(move |&i| i != c).map(move |i| self.wave_of(i))
    }

    /// `(k, a_k)` for every stored mode.
    pub fn iter(&self) -> impl Iterator<Item = (WaveVector, f64)> + '_ {
        let c = self.center();
        self.coeffs
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != c)
            .map(move |(i, &a)| (self.wave_of(i), a))
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|a| a.is_finite())
    }

    /// Coefficient pairing `Σ a_k b_k`.
    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.kmax, other.kmax);
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.coeffs.iter_mut().for_each(|a| *a *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Self) {
        assert_eq!(self.kmax, other.kmax);
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
    }

    /// Copy of the field re-truncated at a different `kmax`.
    pub fn resized(&self, kmax: usize) -> Self {
        let mut out = Self::zeros(kmax);
        for (k, a) in self.iter() {
            if out.contains(k) {
                out.set(k, a);
            }
        }
        out
    }
}

/// `Σ a_k γ_k e_k(x)`, summed term by term.
pub fn eval_velocity(u: &SpectralVelocity, x: Vec2) -> Vec2 {
    PointEvaluator::new(u).velocity(x)
}

pub fn eval_velocity_gradient(u: &SpectralVelocity, x: Vec2) -> Mat2 {
    PointEvaluator::new(u).jet(x).1
}

pub fn eval_velocity_hessian(u: &SpectralVelocity, x: Vec2) -> Hess2 {
    PointEvaluator::new(u).jet2(x).2
}

/// Keep modes with Euclidean `|k| <= nstar`.
pub fn project_low(u: &SpectralVelocity, nstar: usize) -> SpectralVelocity {
    let n2 = (nstar * nstar) as i64;
    let mut out = u.clone();
    let c = out.center();
    for i in 0..out.coeffs.len() {
        if i != c && out.wave_of(i).norm_sq() > n2 {
            out.coeffs[i] = 0.0;
        }
    }
    out
}

/// Keep modes with Euclidean `|k| > nstar`.
pub fn project_high(u: &SpectralVelocity, nstar: usize) -> SpectralVelocity {
    let n2 = (nstar * nstar) as i64;
    let mut out = u.clone();
    let c = out.center();
    for i in 0..out.coeffs.len() {
        if i == c || out.wave_of(i).norm_sq() <= n2 {
            out.coeffs[i] = 0.0;
        }
    }
    out
}

/// `(Σ |k|^{2n} a_k²)^{1/2}` in the coefficient convention.
pub fn sobolev_norm(u: &SpectralVelocity, n: u32) -> f64 {
    u.iter()
        .map(|(k, a)| (k.norm_sq() as f64).powi(n as i32) * a * a)
        .sum::<f64>()
        .sqrt()
}

/// Pointwise evaluator for a fixed field: modes are packed once so repeated
/// evaluations (particle RK4 stages) only pay for the trigonometric sum.
///
/// With `c_k = a_k - i a_{-k}` and `z = e^{ik·x}`, `u_i = Im Σ γ_i c z` and
/// `∂_j u_i = Re Σ γ_i k_j c z`; each `k2` row is summed against the `x1`
/// phase table first and multiplied by `e^{i k2 x2}` once.
#[derive(Debug, Clone)]
pub struct PointEvaluator {
    kmax: usize,
    /// `[γ1 c, γ2 c, γ1 k1 c, γ1 k2 c, γ2 k1 c]` per mode.
    coef: Vec<[Complex64; 5]>,
    k: Vec<Vec2>,
    i1: Vec<usize>,
    /// `(k2, start, end)` ranges into the mode arrays.
    rows: Vec<(usize, usize, usize)>,
}

impl PointEvaluator {
    pub fn new(u: &SpectralVelocity) -> Self {
        let mut ev = Self { kmax: u.kmax, coef: Vec::new(), k: Vec::new(), i1: Vec::new(), rows: Vec::new() };
        ev.refresh(u);
        ev
    }

    /// Repack for a new field, reusing the buffers.
    pub fn refresh(&mut self, u: &SpectralVelocity) {
        let km = u.kmax as i32;
        let w = u.width();
        let d = u.dense();
        self.kmax = u.kmax;
        self.coef.clear();
        self.k.clear();
        self.i1.clear();
        self.rows.clear();
        for k2 in 0..=km {
            let start = self.coef.len();
            let k1_start = if k2 == 0 { 1 } else { -km };
            for k1 in k1_start..=km {
                let ap = d[(k1 + km) as usize * w + (k2 + km) as usize];
                let am = d[(km - k1) as usize * w + (km - k2) as usize];
                if ap == 0.0 && am == 0.0 {
                    continue;
                }
                let c = Complex64::new(ap, -am);
                let kf = [k1 as f64, k2 as f64];
                let inv = 1.0 / (kf[0] * kf[0] + kf[1] * kf[1]);
                let g = [kf[1] * inv, -kf[0] * inv];
                self.coef.push([c * g[0], c * g[1], c * (g[0] * kf[0]), c * (g[0] * kf[1]), c * (g[1] * kf[0])]);
                self.k.push(kf);
                self.i1.push((k1 + km) as usize);
            }
            if self.coef.len() > start {
                self.rows.push((k2 as usize, start, self.coef.len()));
            }
        }
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    /// Phase tables `e^{i j x1}` for `j ∈ -kmax..=kmax` and `e^{i j x2}` for
    /// `j ∈ 0..=kmax`.
    fn phases(&self, x: Vec2) -> (Vec<Complex64>, Vec<Complex64>) {
        let km = self.kmax;
        let mut p1 = vec![Complex64::new(1.0, 0.0); 2 * km + 1];
        let mut p2 = vec![Complex64::new(1.0, 0.0); km + 1];
        let z1 = Complex64::new(x[0].cos(), x[0].sin());
        let z2 = Complex64::new(x[1].cos(), x[1].sin());
        let mut c = Complex64::new(1.0, 0.0);
        for j in 1..=km {
            c *= z1;
            p1[km + j] = c;
            p1[km - j] = c.conj();
        }
        let mut c = Complex64::new(1.0, 0.0);
        for slot in p2.iter_mut().skip(1) {
            c *= z2;
            *slot = c;
        }
        (p1, p2)
    }

    fn sums<const M: usize>(&self, x: Vec2) -> [Complex64; M] {
        let (p1, p2) = self.phases(x);
        let zero = Complex64::new(0.0, 0.0);
        let mut total = [zero; M];
        for &(k2, start, end) in &self.rows {
            let mut acc = [zero; M];
            for idx in start..end {
                let z = p1[self.i1[idx]];
                let c = &self.coef[idx];
                for m in 0..M {
                    acc[m] += c[m] * z;
                }
            }
            let w = p2[k2];
            for m in 0..M {
                total[m] += acc[m] * w;
            }
        }
        total
    }

    pub fn velocity(&self, x: Vec2) -> Vec2 {
        let t = self.sums::<2>(x);
        [t[0].im, t[1].im]
    }

    /// `(u(x), Du(x))`.
    pub fn jet(&self, x: Vec2) -> (Vec2, Mat2) {
        let t = self.sums::<5>(x);
        let d00 = t[2].re;
        ([t[0].im, t[1].im], [[d00, t[3].re], [t[4].re, -d00]])
    }

    /// `(u(x), Du(x), D²u(x))`.
    pub fn jet2(&self, x: Vec2) -> (Vec2, Mat2, Hess2) {
        let (u, du) = self.jet(x);
        let (p1, p2) = self.phases(x);
        let mut h = [[[0.0; 2]; 2]; 2];
        for &(k2, start, end) in &self.rows {
            for idx in start..end {
                let z = p1[self.i1[idx]] * p2[k2];
                let c = &self.coef[idx];
                let k = self.k[idx];
                // γ_i k_j c z with the trace-free (2,2) entry.
                let gk = [[c[2] * z, c[3] * z], [c[4] * z, -(c[2] * z)]];
                for i in 0..2 {
                    for j in 0..2 {
                        for l in 0..2 {
                            h[i][j][l] -= gk[i][j].im * k[l];
                        }
                    }
                }
            }
        }
        (u, du, h)
    }
}

/// Physical samples of a vector field on the uniform `n × n` grid;
/// sample `(i, j)` sits at `x = 2π(i, j)/n` and is stored at `i * n + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub n: usize,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

impl GridField {
    pub fn point(&self, i: usize, j: usize) -> Vec2 {
        [TWO_PI * i as f64 / self.n as f64, TWO_PI * j as f64 / self.n as f64]
    }
}

fn wrap_index(k: i32, n: usize) -> usize {
    k.rem_euclid(n as i32) as usize
}

/// Complex 2D transforms on a fixed square grid with reusable plans.
pub struct FftGrid {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    tmp: Vec<Complex64>,
}

impl std::fmt::Debug for FftGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftGrid").field("n", &self.n).finish()
    }
}

impl Clone for FftGrid {
    fn clone(&self) -> Self {
        Self::new(self.n)
    }
}

impl FftGrid {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len()) * n;
        Self {
            n,
            fwd,
            inv,
            scratch: vec![Complex64::new(0.0, 0.0); len.max(1)],
            tmp: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn transpose(&mut self, data: &mut [Complex64]) {
        let n = self.n;
        self.tmp.copy_from_slice(data);
        const B: usize = 8;
        for ib in (0..n).step_by(B) {
            for jb in (0..n).step_by(B) {
                for i in ib..(ib + B).min(n) {
                    for j in jb..(jb + B).min(n) {
                        data[j * n + i] = self.tmp[i * n + j];
                    }
                }
            }
        }
    }

    /// Synthesis `f(x) = Σ f̂(k) e^{ik·x}` (unnormalised inverse DFT).
    /// Spectral input uses the layout of [`FftGrid::slot`]; physical output
    /// is `i * n + j`.
    pub fn synthesize(&mut self, data: &mut [Complex64]) {
        self.synthesize_band(data, self.n)
    }

    /// As [`FftGrid::synthesize`] for input supported on `|k2| <= band`.
    pub fn synthesize_band(&mut self, data: &mut [Complex64], band: usize) {
        let n = self.n;
        let plan = self.inv.clone();
        if band >= n / 2 {
            plan.process_with_scratch(data, &mut self.scratch);
        } else {
            // Rows 0..=band and n-band..n are the only non-zero ones.
            plan.process_with_scratch(&mut data[..(band + 1) * n], &mut self.scratch);
            plan.process_with_scratch(&mut data[(n - band) * n..], &mut self.scratch);
        }
        self.transpose(data);
        plan.process_with_scratch(data, &mut self.scratch);
    }

    /// Analysis `f̂(k) = n⁻² Σ f(x) e^{-ik·x}`.
    pub fn analyze(&mut self, data: &mut [Complex64]) {
        self.analyze_band(data, self.n)
    }

    /// As [`FftGrid::analyze`], computing only the outputs with `|k2| <= band`.
    pub fn analyze_band(&mut self, data: &mut [Complex64], band: usize) {
        let n = self.n;
        let plan = self.fwd.clone();
        plan.process_with_scratch(data, &mut self.scratch);
        self.transpose(data);
        let s = 1.0 / (n * n) as f64;
        if band >= n / 2 {
            plan.process_with_scratch(data, &mut self.scratch);
            data.iter_mut().for_each(|z| *z *= s);
        } else {
            let (lo, hi) = data.split_at_mut((n - band) * n);
            for r in [&mut lo[..(band + 1) * n], hi] {
                plan.process_with_scratch(r, &mut self.scratch);
                r.iter_mut().for_each(|z| *z *= s);
            }
        }
    }

    /// Analysis of a real field (imaginary parts of `data` are ignored),
    /// producing only the rows `0 <= k2 <= band` of the spectral layout; the
    /// remaining modes follow from `f̂(-k) = conj f̂(k)` and are left unset.
    pub fn analyze_real_band(&mut self, data: &mut [Complex64], band: usize) {
        let n = self.n;
        assert!(n % 2 == 0, "real analysis needs an even grid");
        let half = n / 2;
        let plan = self.fwd.clone();
        // Pair physical rows 2p, 2p+1 into one complex row.
        for p in 0..half {
            let (r0, r1) = (2 * p * n, (2 * p + 1) * n);
            for j in 0..n {
                self.tmp[p * n + j] = Complex64::new(data[r0 + j].re, data[r1 + j].re);
            }
        }
        plan.process_with_scratch(&mut self.tmp[..half * n], &mut self.scratch);
        let minus_half_i = Complex64::new(0.0, -0.5);
        for p in 0..half {
            let z = &self.tmp[p * n..(p + 1) * n];
            for m in 0..=band.min(n - 1) {
                let a = z[m];
                let b = z[(n - m) % n].conj();
                data[m * n + 2 * p] = (a + b) * 0.5;
                data[m * n + 2 * p + 1] = (a - b) * minus_half_i;
            }
        }
        let s = 1.0 / (n * n) as f64;
        let r = &mut data[..(band.min(n - 1) + 1) * n];
        plan.process_with_scratch(r, &mut self.scratch);
        r.iter_mut().for_each(|z| *z *= s);
    }

    /// Slot of wave vector `k` in an `n × n` spectral array (stored
    /// `k2`-major so each 2D transform needs a single transpose).
    pub fn slot(&self, k: WaveVector) -> usize {
        wrap_index(k.k2, self.n) * self.n + wrap_index(k.k1, self.n)
    }
}

/// Complex vorticity coefficient `ω̂(k)` for `k ∈ Z²₊`; `ω̂(-k)` is its
/// conjugate.
#[inline]
pub fn vorticity_hat(ap: f64, am: f64) -> Complex64 {
    Complex64::new(-0.5 * ap, 0.5 * am)
}

/// Inverse of [`vorticity_hat`]: `(a_k, a_{-k})` for `k ∈ Z²₊`.
#[inline]
pub fn coeffs_from_vorticity_hat(w: Complex64) -> (f64, f64) {
    (-2.0 * w.re, 2.0 * w.im)
}

/// Iterate `k ∈ Z²₊` with `|k|∞ <= kmax`.
pub fn positive_modes(kmax: usize) -> impl Iterator<Item = WaveVector> {
    let km = kmax as i32;
    (0..=km).flat_map(move |k2| {
        let start = if k2 == 0 { 1 } else { -km };
        (start..=km).map(move |k1| WaveVector { k1, k2 })
    })
}

pub fn check_resolution(gridsize: usize, kmax: usize) -> Result<(), SpectralError> {
    let need = 2 * kmax + 2;
    if gridsize < need {
        return Err(SpectralError::Resolution { gridsize, kmax, need });
    }
    Ok(())
}

/// Synthesize `u` on the `gridsize × gridsize` grid.
pub fn to_grid(u: &SpectralVelocity, gridsize: usize) -> Result<GridField, SpectralError> {
    check_resolution(gridsize, u.kmax)?;
    let mut fft = FftGrid::new(gridsize);
    Ok(to_grid_with(u, &mut fft))
}

pub fn to_grid_with(u: &SpectralVelocity, fft: &mut FftGrid) -> GridField {
    let n = fft.n();
    let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
    for k in positive_modes(u.kmax) {
        let w = vorticity_hat(u.get(k), u.get(k.neg()));
        if w.re == 0.0 && w.im == 0.0 {
            continue;
        }
        let g = gamma(k);
        // û(k) = i γ_k ω̂(k); pack û1 + i û2 so one transform yields both.
        let iw = Complex64::new(-w.im, w.re);
        let u1 = iw * g[0];
        let u2 = iw * g[1];
        let i = Complex64::new(0.0, 1.0);
        buf[fft.slot(k)] += u1 + i * u2;
        buf[fft.slot(k.neg())] += u1.conj() + i * u2.conj();
    }
    fft.synthesize(&mut buf);
    GridField {
        n,
        u1: buf.iter().map(|z| z.re).collect(),
        u2: buf.iter().map(|z| z.im).collect(),
    }
}

/// Analysis followed by projection onto `{γ_k e_k}`:
/// `a_k = ⟨f, γ_k e_k⟩ / ‖γ_k e_k‖²`.
pub fn from_grid(field: &GridField, kmax: usize) -> Result<SpectralVelocity, SpectralError> {
    check_resolution(field.n, kmax)?;
    let mut fft = FftGrid::new(field.n);
    from_grid_with(field, kmax, &mut fft)
}

pub fn from_grid_with(
    field: &GridField,
    kmax: usize,
    fft: &mut FftGrid,
) -> Result<SpectralVelocity, SpectralError> {
    let n = field.n;
    if field.u1.len() != n * n || field.u2.len() != n * n {
        return Err(SpectralError::Shape { got: field.u1.len().min(field.u2.len()), expected: n * n });
    }
    let mut buf: Vec<Complex64> =
        field.u1.iter().zip(&field.u2).map(|(&a, &b)| Complex64::new(a, b)).collect();
    fft.analyze(&mut buf);
    let mut out = SpectralVelocity::zeros(kmax);
    for k in positive_modes(kmax) {
        let zp = buf[fft.slot(k)];
        let zm = buf[fft.slot(k.neg())].conj();
        // Unpack the two real components: f̂1(k) = (zp + zm)/2, f̂2(k) = (zp - zm)/(2i).
        let f1 = (zp + zm) * 0.5;
        let f2 = (zp - zm) * Complex64::new(0.0, -0.5);
        let g = gamma(k);
        let proj = f1 * g[0] + f2 * g[1];
        let n2 = k.norm_sq() as f64;
        out.set(k, -2.0 * n2 * proj.im);
        out.set(k.neg(), -2.0 * n2 * proj.re);
    }
    Ok(out)
}
