//! Simulation and diagnostics for Lagrangian chaos in the stochastically
//! forced two-dimensional Navier–Stokes equations on the torus.
//!
//! Layers, bottom up: [`spectral`] (basis and transforms), [`solver`]
//! (velocity SDE), [`flow`] (particle, cocycle, projective direction),
//! [`lyapunov`] (exponent estimators), [`malliavin`] (low-mode propagators,
//! partial Malliavin matrix, control and residuals), [`brackets`] (Lie
//! brackets and spanning), [`lab`] (configuration, RNG streams, checkpoints,
//! experiments).

pub mod brackets;
pub mod flow;
pub mod lab;
pub mod lyapunov;
pub mod malliavin;
pub mod solver;
pub mod spectral;
