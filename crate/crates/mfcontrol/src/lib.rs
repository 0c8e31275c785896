//! Particle-based solver for mean-field stochastic optimal control.
//!
//! The library solves control problems in which a continuum of identical
//! agents is steered by a single controller and every agent's dynamics and
//! cost depend on the population distribution. The state equation is linear
//! in state, control and the population mean,
//!
//! ```text
//! dY(s) = [f0 + f1 Y + f2 E(Y) + f3 v] ds + sum_j [s0_j + s1_j Y + s2_j E(Y) + s3_j v] dw_j
//! ```
//!
//! while the running and terminal costs may depend on the distribution in a
//! nonlinear way. Optimality is characterized through the stochastic maximum
//! principle: the optimal control minimizes a Hamiltonian built from a costate
//! pair `(P, Q)` that solves a backward SDE coupled to the forward state.
//!
//! The numerical core approximates the population by an interacting particle
//! ensemble and solves the coupled forward-backward system with a regression
//! Monte Carlo scheme:
//!
//! - [`measure`]: weighted particle ensembles, Wasserstein-2 distance, Dirac
//!   perturbations used for distributional finite differences.
//! - [`model`]: problem data (linear dynamics, cost model with derivative
//!   callbacks, assumption checks).
//! - [`paths`]: time grids and reproducible Brownian increment bundles.
//! - [`hamiltonian`]: pointwise Hamiltonian evaluation and control
//!   minimization.
//! - [`fbsde`]: the particle FBSDE solver (Picard iteration, damping,
//!   continuation) plus a shared solver for affine-driver linear systems.
//! - [`flows`]: linearized (variational) systems along a solved base
//!   solution: directional derivatives, spatial Jacobians and
//!   measure-derivative flows.
//! - [`analysis`]: value function evaluation, gradient/Hessian identities,
//!   dynamic-programming and master-equation residual verification.
//! - [`bench`]: closed-form linear-quadratic and deterministic oracles and
//!   benchmark drivers.
//!
//! All randomness is derived from explicit `u64` seeds through per-purpose
//! counter streams, so every result is bitwise reproducible for a fixed seed
//! regardless of thread count.

pub mod analysis;
pub mod bench;
pub mod error;
pub mod fbsde;
pub mod flows;
pub mod hamiltonian;
pub mod linalg;
pub mod measure;
pub mod model;
pub mod paths;

pub use error::{Error, Result};
