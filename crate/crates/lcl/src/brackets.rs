//! Lie brackets of the noise directions with the drift on the tangent
//! bundle of `T² × S¹`, the spanning check, and `Υ_l Q^k`.
//!
//! Coefficients `(u)_k` here are the solver's `a_k`, i.e. `u = Σ a_k e_k γ_k`;
//! in terms of the `L²` pairing, `a_k = ⟨u, e_kγ_k⟩ / (2π² |γ_k|²)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::flow::{dot, normalize};
use crate::malliavin::LowSpace;
use crate::solver::{Advection, ForcingSpec, SolverConfig};
use crate::spectral::{eval_basis, gamma, SpectralVelocity, Vec2, WaveVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundleVector {
    pub bx: Vec2,
    pub bv: Vec2,
}

impl BundleVector {
    pub const ZERO: Self = Self { bx: [0.0; 2], bv: [0.0; 2] };

    /// `(bx, ⟨bv, v⊥⟩)` in the frame `v⊥ = (-v2, v1)`.
    pub fn frame_coords(&self, v: Vec2) -> [f64; 3] {
        [self.bx[0], self.bx[1], -v[1] * self.bv[0] + v[0] * self.bv[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowModeField {
    pub fu: Vec<f64>,
    pub fxv: BundleVector,
}

impl LowModeField {
    /// Embedded `[fu; bx; bv]`.
    pub fn to_dvector(&self) -> DVector<f64> {
        let m = self.fu.len();
        let mut d = DVector::zeros(m + 4);
        d.rows_mut(0, m).copy_from_slice(&self.fu);
        d[m] = self.fxv.bx[0];
        d[m + 1] = self.fxv.bx[1];
        d[m + 2] = self.fxv.bv[0];
        d[m + 3] = self.fxv.bv[1];
        d
    }
}

fn proj(v: Vec2, w: Vec2) -> Vec2 {
    let s = dot(v, w);
    [w[0] - s * v[0], w[1] - s * v[1]]
}

fn kdot(k: WaveVector, v: Vec2) -> f64 {
    k.k1 as f64 * v[0] + k.k2 as f64 * v[1]
}

/// `F̄(u, x, v) = (Σ a_k e_k(x) γ_k, Σ a_k (k·v) e_{-k}(x) Π_v γ_k)`, summed
/// mode by mode.
pub fn fbar_eval(u: &SpectralVelocity, x: Vec2, v: Vec2) -> BundleVector {
    let mut out = BundleVector::ZERO;
    for (k, a) in u.iter() {
        if a == 0.0 {
            continue;
        }
        let b = bracket_ek_fbar(x, v, k);
        for i in 0..2 {
            out.bx[i] += a * b.bx[i];
            out.bv[i] += a * b.bv[i];
        }
    }
    out
}

/// `[e_kγ_k, F̄](x, v) = (e_k(x) γ_k, (k·v) e_{-k}(x) Π_v γ_k)`.
pub fn bracket_ek_fbar(x: Vec2, v: Vec2, k: WaveVector) -> BundleVector {
    let g = gamma(k);
    let e = eval_basis(k, x).expect("nonzero mode");
    let s = kdot(k, v) * eval_basis(k.neg(), x).expect("nonzero mode");
    let pg = proj(v, g);
    BundleVector { bx: [e * g[0], e * g[1]], bv: [s * pg[0], s * pg[1]] }
}

/// A vector field on `H × T² × S¹` (velocity block kept in coefficients).
pub type BundleField<'a> = dyn Fn(&SpectralVelocity, Vec2, Vec2) -> (SpectralVelocity, Vec2, Vec2) + 'a;

/// Central-difference Lie bracket `[E, F] = DF·E - DE·F` at `(u, x, v)`.
pub fn fd_bracket(
    e: &BundleField<'_>,
    f: &BundleField<'_>,
    u: &SpectralVelocity,
    x: Vec2,
    v: Vec2,
    delta: f64,
) -> (SpectralVelocity, Vec2, Vec2) {
    let dir = |g: &BundleField<'_>, along: &(SpectralVelocity, Vec2, Vec2)| {
        let shift = |s: f64| {
            let mut us = u.clone();
            us.axpy(s, &along.0);
            let xs = [x[0] + s * along.1[0], x[1] + s * along.1[1]];
            let vs = [v[0] + s * along.2[0], v[1] + s * along.2[1]];
            g(&us, xs, vs)
        };
        let (p, m) = (shift(delta), shift(-delta));
        let mut du = p.0.clone();
        du.axpy(-1.0, &m.0);
        du.scale(0.5 / delta);
        let c = 0.5 / delta;
        (du, [(p.1[0] - m.1[0]) * c, (p.1[1] - m.1[1]) * c], [(p.2[0] - m.2[0]) * c, (p.2[1] - m.2[1]) * c])
    };
    let ev = e(u, x, v);
    let fv = f(u, x, v);
    let (a, b) = (dir(f, &ev), dir(e, &fv));
    let mut du = a.0;
    du.axpy(-1.0, &b.0);
    (du, [a.1[0] - b.1[0], a.1[1] - b.1[1]], [a.2[0] - b.2[0], a.2[1] - b.2[1]])
}

/// Numerical rank (relative threshold `1e-8`) of the `3 × |K|` matrix of
/// brackets in the frame `(e1, e2, v⊥)`.
pub fn spanning_rank(x: Vec2, v: Vec2, ks: &[WaveVector]) -> usize {
    if ks.is_empty() {
        return 0;
    }
    let v = normalize(v);
    let mut m = DMatrix::zeros(3, ks.len());
    for (j, &k) in ks.iter().enumerate() {
        let c = bracket_ek_fbar(x, v, k).frame_coords(v);
        for i in 0..3 {
            m[(i, j)] = c[i];
        }
    }
    let sv = m.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-8 * top).count()
}

/// Minimum over samples of `max_k max(|⟨Q^k, h⟩|, |⟨Υ_l Q^k, h⟩|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub u_low_norm: f64,
    pub samples: usize,
    pub min: f64,
    pub argmin: usize,
}

/// `Υ_l` evaluation at a fixed velocity.
pub struct BracketContext {
    low: LowSpace,
    adv: Advection,
    nu: f64,
}

impl BracketContext {
    pub fn new(forcing: &ForcingSpec, cfg: &SolverConfig) -> Self {
        Self { low: LowSpace::new(forcing, cfg), adv: Advection::new(cfg.kmax, cfg.gridsize), nu: cfg.nu }
    }

    pub fn low(&self) -> &LowSpace {
        &self.low
    }

    /// `Π_l[B(u, e_kγ_k) + B(e_kγ_k, u)]` for every `k ∈ Z_0`, with
    /// `B(u, w) = Leray(u·∇w)`; columns follow `Z_0` order.
    pub fn advection_brackets(&mut self, u: &SpectralVelocity) -> Vec<Vec<f64>> {
        let fu = self.adv.fields(u);
        let modes = self.low.modes().to_vec();
        modes
            .iter()
            .map(|&k| {
                let mut e = SpectralVelocity::zeros(u.kmax());
                e.set(k, 1.0);
                let fe = self.adv.fields(&e);
                // The solver's polarisation carries the minus sign of the drift.
                self.low.restrict(&self.adv.symmetric(&fu, &fe)).iter().map(|a| -a).collect()
            })
            .collect()
    }

    fn assemble(&self, j: usize, adv_col: &[f64], x: Vec2, v: Vec2) -> LowModeField {
        let k = self.low.modes()[j];
        let q = self.low.q()[j];
        let lam = self.nu * k.norm_sq() as f64;
        let mut fu: Vec<f64> = adv_col.iter().map(|a| q * a).collect();
        fu[j] += q * lam;
        let b = bracket_ek_fbar(x, normalize(v), k);
        LowModeField {
            fu,
            fxv: BundleVector { bx: [-q * b.bx[0], -q * b.bx[1]], bv: [-q * b.bv[0], -q * b.bv[1]] },
        }
    }

    /// `Υ_l Q^k = q_k[F̄, e_kγ_k] - q_k[B(u,u), e_kγ_k]_l - q_k[Â, e_kγ_k]_l`.
    pub fn upsilon_q(&mut self, u: &SpectralVelocity, x: Vec2, v: Vec2, k: WaveVector) -> LowModeField {
        let j = self.low.modes().iter().position(|&m| m == k).expect("k must be a forced mode");
        let cols = self.advection_brackets(u);
        self.assemble(j, &cols[j], x, v)
    }

    /// `Υ_l Q^k` for all `k ∈ Z_0`.
    pub fn upsilon_all(&mut self, u: &SpectralVelocity, x: Vec2, v: Vec2) -> Vec<LowModeField> {
        let cols = self.advection_brackets(u);
        (0..self.low.m()).map(|j| self.assemble(j, &cols[j], x, v)).collect()
    }

    /// Samples are `(x, v, h)` with `h` embedded as `[hu; hx; hv]`, unit norm
    /// and tangent to `v`.
    pub fn lower_bound_check(
        &mut self,
        u: &SpectralVelocity,
        samples: &[(Vec2, Vec2, DVector<f64>)],
    ) -> LowerBoundReport {
        let cols = self.advection_brackets(u);
        let u_low_norm = self.low.restrict(u).iter().map(|a| a * a).sum::<f64>().sqrt();
        let m = self.low.m();
        let mut min = f64::INFINITY;
        let mut argmin = 0;
        for (s, (x, v, h)) in samples.iter().enumerate() {
            let mut best: f64 = 0.0;
            for j in 0..m {
                best = best.max((self.low.q()[j] * h[j]).abs());
                let ups = self.assemble(j, &cols[j], *x, *v).to_dvector();
                best = best.max(ups.dot(h).abs());
            }
            if best < min {
                min = best;
                argmin = s;
            }
        }
        LowerBoundReport { u_low_norm, samples: samples.len(), min, argmin }
    }
}
