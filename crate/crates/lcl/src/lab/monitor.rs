//! Monitored statistics: the super-Lyapunov function, windowed moment
//! surrogates and a two-sample Kolmogorov–Smirnov test.

use serde::{Deserialize, Serialize};

use crate::spectral::{sobolev_norm, SpectralVelocity};

/// `V(u) = σ(‖u‖²_{H¹} + α‖u‖^{1/3}_{H⁵})`.
pub fn super_lyapunov_v(u: &SpectralVelocity, sigma: f64, alpha: f64) -> f64 {
    let h1 = sobolev_norm(u, 1);
    sigma * (h1 * h1 + alpha * sobolev_norm(u, 5).cbrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorSample {
    pub t: f64,
    /// `‖∇u‖²` in the coefficient convention.
    pub grad_sq: f64,
    pub v: f64,
}

impl MonitorSample {
    pub fn of(u: &SpectralVelocity, t: f64, sigma: f64, alpha: f64) -> Self {
        let h1 = sobolev_norm(u, 1);
        Self { t, grad_sq: h1 * h1, v: super_lyapunov_v(u, sigma, alpha) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub window_sup_grad: Vec<f64>,
    pub window_sup_v: Vec<f64>,
    /// Mean over windows of `exp(η sup ‖∇u‖²)`.
    pub exp_moment_grad: f64,
    /// Mean over samples of `exp(V(u_t))`.
    pub exp_moment_v: f64,
    /// Three consecutive windows each above 1.5× the one before.
    pub flagged: bool,
}

fn runaway(s: &[f64]) -> bool {
    s.windows(4).any(|w| w[1] > 1.5 * w[0] && w[2] > 1.5 * w[1] && w[3] > 1.5 * w[2])
}

/// Split `samples` into `windows` consecutive groups of equal size (the
/// remainder joins the last) and summarise each by its supremum.
pub fn moment_monitor(samples: &[MonitorSample], windows: usize, eta: f64) -> MomentReport {
    let w = windows.clamp(1, samples.len().max(1));
    let size = samples.len() / w;
    let mut sup_g = Vec::with_capacity(w);
    let mut sup_v = Vec::with_capacity(w);
    for i in 0..w {
        let end = if i + 1 == w { samples.len() } else { (i + 1) * size };
        let chunk = &samples[i * size..end];
        sup_g.push(chunk.iter().map(|s| s.grad_sq).fold(f64::NEG_INFINITY, f64::max));
        sup_v.push(chunk.iter().map(|s| s.v).fold(f64::NEG_INFINITY, f64::max));
    }
    let n = samples.len().max(1) as f64;
    MomentReport {
        exp_moment_grad: sup_g.iter().map(|g| (eta * g).exp()).sum::<f64>() / sup_g.len() as f64,
        exp_moment_v: samples.iter().map(|s| s.v.exp()).sum::<f64>() / n,
        flagged: runaway(&sup_g) || runaway(&sup_v),
        window_sup_grad: sup_g,
        window_sup_v: sup_v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    /// Asymptotic p-value.
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic Kolmogorov tail.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    if n == 0 || m == 0 {
        return KsResult { statistic: 0.0, p_value: 1.0 };
    }
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let t = x[i].min(y[j]);
        while i < n && x[i] <= t {
            i += 1;
        }
        while j < m && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lam = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    KsResult { statistic: d, p_value: kolmogorov_tail(lam) }
}

/// `Q(λ) = 2 Σ_{j≥1} (-1)^{j-1} e^{-2j²λ²}`.
fn kolmogorov_tail(lam: f64) -> f64 {
    if lam < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lam * lam).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
