//! Particle solver for the coupled forward-backward system.
//!
//! The forward state of every particle is advanced by Euler-Maruyama under
//! the control that minimizes the Hamiltonian at the current costate guess;
//! the costate pair `(P, Q)` is recovered by backward regression Monte
//! Carlo: at each knot the conditional expectations defining `P` and `Q`
//! are projected onto a polynomial basis in the particle state. The two
//! passes are alternated in a damped Picard iteration, optionally embedded
//! in a homotopy that scales the backward driver from zero (where the
//! backward pass is a plain conditional expectation of the terminal
//! condition) up to the full coupling.
//!
//! The same machinery solves affine linear systems along a converged base
//! solution through the [`AffineFlowDriver`] interface: tangent flows,
//! spatial Jacobians and measure-derivative flows supply their coefficient
//! callbacks and reuse the forward stepping, the per-knot regression and
//! the damped iteration unchanged.
//!
//! Reproducibility invariants: every ensemble reduction (means, Gram and
//! cross-moment accumulation, convergence metrics) runs serially in
//! particle order, and parallel sections only write disjoint per-particle
//! slices. Solves are therefore bitwise identical for a fixed seed at any
//! worker count.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{minimize_control_from, ControlOptions};
use crate::linalg::weighted_mean_flat;
use crate::measure::{ParticleEnsemble, Pop};
use crate::model::{estimate_convexity, DynCoeffs, InteractionKind, ProblemSpec};
use crate::paths::{derive_seed, BrownianBundle, StreamPurpose, TimeGrid};

// ---------------------------------------------------------------------------
// Storage

/// Dense per-knot, per-particle storage of a vector quantity.
///
/// Layout is `[knot][particle][component]` with each knot block contiguous,
/// so a knot slice can back a [`Pop`] view or a regression design without
/// copying. Matrix-valued quantities (the martingale field) store each
/// particle's matrix column-major inside its component slot.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotField {
    flat: Vec<f64>,
    knots: usize,
    particles: usize,
    dim: usize,
}

impl KnotField {
    pub fn zeros(knots: usize, particles: usize, dim: usize) -> Self {
        KnotField {
            flat: vec![0.0; knots * particles * dim],
            knots,
            particles,
            dim,
        }
    }

    #[inline]
    pub fn knots(&self) -> usize {
        self.knots
    }

    #[inline]
    pub fn particles(&self) -> usize {
        self.particles
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn at(&self, k: usize, i: usize) -> &[f64] {
        let base = (k * self.particles + i) * self.dim;
        &self.flat[base..base + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, k: usize, i: usize) -> &mut [f64] {
        let base = (k * self.particles + i) * self.dim;
        &mut self.flat[base..base + self.dim]
    }

    /// All particles of knot `k` as one flat `[particle][component]` slice.
    #[inline]
    pub fn knot_slice(&self, k: usize) -> &[f64] {
        let stride = self.particles * self.dim;
        &self.flat[k * stride..(k + 1) * stride]
    }

    #[inline]
    pub fn knot_slice_mut(&mut self, k: usize) -> &mut [f64] {
        let stride = self.particles * self.dim;
        &mut self.flat[k * stride..(k + 1) * stride]
    }

    /// Whole storage, for bitwise comparisons.
    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    /// Disjoint views of knot `k` (read) and knot `k + 1` (write) for
    /// stepping.
    fn step_pair_mut(&mut self, k: usize) -> (&[f64], &mut [f64]) {
        let stride = self.particles * self.dim;
        let (head, tail) = self.flat.split_at_mut((k + 1) * stride);
        (&head[k * stride..], &mut tail[..stride])
    }

    /// Weighted ensemble mean of knot `k`, accumulated in particle order.
    pub fn weighted_mean(&self, k: usize, weights: &[f64]) -> DVector<f64> {
        weighted_mean_flat(self.knot_slice(k), self.dim, weights)
    }
}

// ---------------------------------------------------------------------------
// Regression basis and fitted policies

/// Basis of the per-knot conditional-expectation regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisId {
    /// Features `[1, u]`. Exact whenever the fitted field is affine in the
    /// inputs, which covers the linear-quadratic family.
    Affine,
    /// Affine features plus all products `u_a u_b`, `a <= b`.
    Quadratic,
}

impl BasisId {
    pub fn feature_count(self, input_dim: usize) -> usize {
        match self {
            BasisId::Affine => 1 + input_dim,
            BasisId::Quadratic => 1 + input_dim + input_dim * (input_dim + 1) / 2,
        }
    }
}

/// Raw (unstandardized) feature vector of `u`.
fn fill_features(basis: BasisId, u: &[f64], out: &mut [f64]) {
    out[0] = 1.0;
    let m = u.len();
    out[1..1 + m].copy_from_slice(u);
    if let BasisId::Quadratic = basis {
        let mut idx = 1 + m;
        for a in 0..m {
            for b in a..m {
                out[idx] = u[a] * u[b];
                idx += 1;
            }
        }
    }
}

/// Per-coordinate weighted mean and spread of the regression inputs, plus
/// an activity flag. Coordinates whose spread sits at roundoff level carry
/// no information; their features are pinned to zero and excluded from the
/// normal equations, so a constant column is absorbed exactly by the
/// intercept instead of poisoning the solve with a near-singular design.
fn standardize(
    inputs: &[f64],
    input_dim: usize,
    weights: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut mu = vec![0.0; input_dim];
    for (i, &w) in weights.iter().enumerate() {
        let row = &inputs[i * input_dim..(i + 1) * input_dim];
        for a in 0..input_dim {
            mu[a] += w * row[a];
        }
    }
    let mut var = vec![0.0; input_dim];
    for (i, &w) in weights.iter().enumerate() {
        let row = &inputs[i * input_dim..(i + 1) * input_dim];
        for a in 0..input_dim {
            let dev = row[a] - mu[a];
            var[a] += w * dev * dev;
        }
    }
    let mut scale = vec![1.0; input_dim];
    let mut active = vec![false; input_dim];
    for a in 0..input_dim {
        let s = var[a].sqrt();
        if s > 1e-12 * (1.0 + mu[a].abs()) {
            scale[a] = s;
            active[a] = true;
        }
    }
    (mu, scale, active)
}

/// Activity of each basis feature given coordinate activity. Products are
/// informative only when both factors are.
fn feature_activity(basis: BasisId, active_coord: &[bool]) -> Vec<bool> {
    let m = active_coord.len();
    let mut out = Vec::with_capacity(basis.feature_count(m));
    out.push(true);
    out.extend_from_slice(active_coord);
    if let BasisId::Quadratic = basis {
        for a in 0..m {
            for b in a..m {
                out.push(active_coord[a] && active_coord[b]);
            }
        }
    }
    out
}

/// Matrix `T` expressing the standardized features in raw features, so a
/// coefficient matrix fitted in standardized coordinates becomes
/// `C_raw = C_std T` and can be evaluated and blended without carrying the
/// per-knot standardization around.
fn standardized_to_raw(basis: BasisId, mu: &[f64], scale: &[f64]) -> DMatrix<f64> {
    let m = mu.len();
    let b = basis.feature_count(m);
    let mut t = DMatrix::zeros(b, b);
    t[(0, 0)] = 1.0;
    for a in 0..m {
        t[(1 + a, 0)] = -mu[a] / scale[a];
        t[(1 + a, 1 + a)] = 1.0 / scale[a];
    }
    if let BasisId::Quadratic = basis {
        // Column index of the raw product feature u_lo u_hi.
        let pair = |p: usize, q: usize| {
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            1 + m + lo * (2 * m - lo + 1) / 2 + (hi - lo)
        };
        let mut row = 1 + m;
        for a in 0..m {
            for c in a..m {
                let denom = scale[a] * scale[c];
                t[(row, pair(a, c))] += 1.0 / denom;
                t[(row, 1 + c)] += -mu[a] / denom;
                t[(row, 1 + a)] += -mu[c] / denom;
                t[(row, 0)] += mu[a] * mu[c] / denom;
                row += 1;
            }
        }
    }
    t
}

/// Weighted least-squares fit of one knot. Returns raw-space coefficients
/// of shape `target_dim x feature_count`. Gram and cross-moment sums are
/// accumulated serially in particle order over the active features only;
/// inactive features (zero-spread coordinates) get zero coefficients. The
/// reduced normal equations are solved by Cholesky with a singular-value
/// fallback for designs that are still collinear (duplicated particles,
/// flow directions proportional to the state).
fn fit_knot(
    basis: BasisId,
    inputs: &[f64],
    input_dim: usize,
    weights: &[f64],
    targets: &[f64],
    target_dim: usize,
) -> Result<DMatrix<f64>> {
    let b = basis.feature_count(input_dim);
    let (mu, scale, active_coord) = standardize(inputs, input_dim, weights);
    let active = feature_activity(basis, &active_coord);
    let idx: Vec<usize> = (0..b).filter(|&p| active[p]).collect();
    let na = idx.len();
    let mut gram = DMatrix::<f64>::zeros(na, na);
    let mut cross = DMatrix::<f64>::zeros(na, target_dim);
    let mut z = vec![0.0; input_dim];
    let mut feat = vec![0.0; b];
    for (i, &w) in weights.iter().enumerate() {
        let row = &inputs[i * input_dim..(i + 1) * input_dim];
        for a in 0..input_dim {
            z[a] = if active_coord[a] {
                (row[a] - mu[a]) / scale[a]
            } else {
                0.0
            };
        }
        fill_features(basis, &z, &mut feat);
        let trow = &targets[i * target_dim..(i + 1) * target_dim];
        for (p, &pf) in idx.iter().enumerate() {
            let wf = w * feat[pf];
            for (q, &qf) in idx.iter().enumerate().take(p + 1) {
                gram[(p, q)] += wf * feat[qf];
            }
            for c in 0..target_dim {
                cross[(p, c)] += wf * trow[c];
            }
        }
    }
    for p in 0..na {
        for q in p + 1..na {
            gram[(p, q)] = gram[(q, p)];
        }
    }
    let solved = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&cross),
        None => {
            let eps = 1e-12 * gram.norm().max(f64::MIN_POSITIVE);
            let pinv = gram.pseudo_inverse(eps).map_err(|e| Error::Regression {
                detail: format!("singular design, pseudo-inverse failed: {e}"),
            })?;
            &pinv * &cross
        }
    };
    let mut full = DMatrix::<f64>::zeros(b, target_dim);
    for (p, &pf) in idx.iter().enumerate() {
        for c in 0..target_dim {
            full[(pf, c)] = solved[(p, c)];
        }
    }
    let t = standardized_to_raw(basis, &mu, &scale);
    Ok(full.transpose() * t)
}

/// `out = mat . x` without allocating.
fn mat_vec_into(mat: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for c in 0..mat.ncols() {
        let xc = x[c];
        let col = mat.column(c);
        for r in 0..mat.nrows() {
            out[r] += col[r] * xc;
        }
    }
}

/// `out += mat^T . x` without allocating.
fn mat_t_vec_acc(mat: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for c in 0..mat.ncols() {
        let col = mat.column(c);
        let mut acc = 0.0;
        for r in 0..mat.nrows() {
            acc += col[r] * x[r];
        }
        out[c] += acc;
    }
}

/// Per-knot regression coefficients of the costate fields, stored in raw
/// input coordinates so successive iterates can be blended coefficient-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRepresentation {
    pub basis: BasisId,
    pub input_dim: usize,
    /// Components of the costate block (the state dimension).
    pub p_dim: usize,
    /// Components of the martingale block (`state_dim * noise_dim`).
    pub q_dim: usize,
    p_coef: Vec<DMatrix<f64>>,
    q_coef: Vec<DMatrix<f64>>,
}

impl PolicyRepresentation {
    pub fn zeros(basis: BasisId, input_dim: usize, p_dim: usize, q_dim: usize, knots: usize) -> Self {
        let b = basis.feature_count(input_dim);
        PolicyRepresentation {
            basis,
            input_dim,
            p_dim,
            q_dim,
            p_coef: vec![DMatrix::zeros(p_dim, b); knots],
            q_coef: vec![DMatrix::zeros(q_dim, b); knots],
        }
    }

    pub fn knots(&self) -> usize {
        self.p_coef.len()
    }

    pub fn p_coefficients(&self, k: usize) -> &DMatrix<f64> {
        &self.p_coef[k]
    }

    pub fn q_coefficients(&self, k: usize) -> &DMatrix<f64> {
        &self.q_coef[k]
    }

    /// Predicted costate at one input. `feat` is scratch of length
    /// `feature_count(input_dim)`.
    pub fn eval_p_into(&self, k: usize, u: &[f64], feat: &mut [f64], out: &mut [f64]) {
        fill_features(self.basis, u, feat);
        mat_vec_into(&self.p_coef[k], feat, out);
    }

    /// Predicted martingale block at one input, column-major.
    pub fn eval_q_into(&self, k: usize, u: &[f64], feat: &mut [f64], out: &mut [f64]) {
        fill_features(self.basis, u, feat);
        mat_vec_into(&self.q_coef[k], feat, out);
    }

    fn set_p(&mut self, k: usize, coef: DMatrix<f64>) {
        self.p_coef[k] = coef;
    }

    fn set_q(&mut self, k: usize, coef: DMatrix<f64>) {
        self.q_coef[k] = coef;
    }

    /// Damped update toward `fit`: `theta fit + (1 - theta) self`.
    fn blend_from(&mut self, theta: f64, fit: &PolicyRepresentation) {
        for k in 0..self.p_coef.len() {
            self.p_coef[k] = theta * &fit.p_coef[k] + (1.0 - theta) * &self.p_coef[k];
            self.q_coef[k] = theta * &fit.q_coef[k] + (1.0 - theta) * &self.q_coef[k];
        }
    }

    /// Coefficients flattened knot by knot, costate block before martingale
    /// block; the layout only has to be stable within one solve.
    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.clear();
        for k in 0..self.p_coef.len() {
            out.extend_from_slice(self.p_coef[k].as_slice());
            out.extend_from_slice(self.q_coef[k].as_slice());
        }
    }

    /// Adds `scale * flat` to the coefficients, inverse layout of
    /// [`flatten_into`].
    fn add_scaled_flat(&mut self, scale: f64, flat: &[f64]) {
        let mut off = 0;
        for k in 0..self.p_coef.len() {
            for v in self.p_coef[k].iter_mut() {
                *v += scale * flat[off];
                off += 1;
            }
            for v in self.q_coef[k].iter_mut() {
                *v += scale * flat[off];
                off += 1;
            }
        }
    }

    fn same_shape(&self, other: &PolicyRepresentation) -> bool {
        self.basis == other.basis
            && self.input_dim == other.input_dim
            && self.p_dim == other.p_dim
            && self.q_dim == other.q_dim
            && self.knots() == other.knots()
    }
}

// ---------------------------------------------------------------------------
// Options and outputs

/// Knobs of the ensemble solver.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Sweep cap of the damped fixed-point iteration.
    pub picard_max: usize,
    /// Convergence threshold on the sup-over-knots weighted RMS change of
    /// the fitted costate fields between sweeps.
    pub picard_tol: f64,
    /// Fraction of the fresh fit kept per sweep, in `(0, 1]`.
    pub damping: f64,
    /// Homotopy stages used by [`continuation_solve`]; 1 attempts the
    /// target problem directly.
    pub continuation_steps: usize,
    pub basis: BasisId,
    pub control: ControlOptions,
    /// Run seed recorded on the solution; auxiliary streams (anchor
    /// particles, probes) derive their own seeds from it.
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            picard_max: 60,
            picard_tol: 1e-9,
            damping: 0.5,
            continuation_steps: 1,
            basis: BasisId::Affine,
            control: ControlOptions::default(),
            seed: 0,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if self.picard_max == 0 {
            return Err(Error::InvalidArgument {
                context: "SolverOptions",
                detail: "picard_max must be positive".into(),
            });
        }
        if !(self.picard_tol > 0.0) {
            return Err(Error::InvalidArgument {
                context: "SolverOptions",
                detail: format!("picard_tol must be positive, got {}", self.picard_tol),
            });
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument {
                context: "SolverOptions",
                detail: format!("damping must lie in (0, 1], got {}", self.damping),
            });
        }
        if self.continuation_steps == 0 {
            return Err(Error::InvalidArgument {
                context: "SolverOptions",
                detail: "continuation_steps must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Convergence record of one solve.
#[derive(Debug, Clone)]
pub struct SolveDiagnostics {
    /// Sweeps used by the final (or only) homotopy stage.
    pub iterations: usize,
    /// Fitted-field change per sweep in that stage.
    pub deltas: Vec<f64>,
    pub converged: bool,
    /// Homotopy scales traversed in order; empty for a direct solve.
    pub continuation: Vec<f64>,
}

/// Trajectories of one forward sweep.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// States, `steps + 1` knots.
    pub y: KnotField,
    /// Controls applied on each step interval, `steps` knots.
    pub v: KnotField,
    /// Weighted ensemble mean per knot.
    pub means: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

/// Converged particle solution of the coupled system.
///
/// Stored fields are self-consistent: the states were simulated under the
/// stored controls, the costate fields are the converged policy's
/// predictions on those states, and the controls minimize the Hamiltonian
/// at those predictions. Re-simulating under the stored controls with the
/// same increments reproduces the states bit for bit.
#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    pub grid: TimeGrid,
    /// Run seed of the solve; derived streams for auxiliary particles key
    /// off it.
    pub seed: u64,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    /// States, `steps + 1` knots.
    pub y: KnotField,
    /// Costates, `steps + 1` knots. The terminal knot holds the exact
    /// terminal condition rather than a regression prediction.
    pub p: KnotField,
    /// Martingale fields, `steps + 1` knots of column-major
    /// `state_dim x noise_dim` blocks. Identically zero for noiseless
    /// dynamics and at the terminal knot.
    pub q: KnotField,
    /// Minimizing controls on each step interval, `steps` knots.
    pub v_hat: KnotField,
    pub policy: PolicyRepresentation,
    pub diagnostics: SolveDiagnostics,
}

// ---------------------------------------------------------------------------
// Shared knot-level kernels

/// True when every diffusion block vanishes at every grid knot. The
/// martingale field is then forced to zero and its regressions skipped.
fn sigma_identically_zero(spec: &ProblemSpec, grid: &TimeGrid) -> bool {
    (0..=grid.steps).all(|k| {
        let c = spec.dynamics.coeffs_at(grid.knot(k));
        c.sig0.iter().all(|v| v.iter().all(|&z| z == 0.0))
            && c.sig1.iter().all(|m| m.iter().all(|&z| z == 0.0))
            && c.sig2.iter().all(|m| m.iter().all(|&z| z == 0.0))
            && c.sig3.iter().all(|m| m.iter().all(|&z| z == 0.0))
    })
}

/// One Euler-Maruyama step of the whole ensemble. `states` and `out` are
/// knot slices; the mean enters through the knot-constant part of the
/// coefficients so every particle sees the identical value.
#[allow(clippy::too_many_arguments)]
fn euler_step_knot(
    coeffs: &DynCoeffs,
    noise_dim: usize,
    sigma_free: bool,
    states: &[f64],
    mean: &DVector<f64>,
    controls: &[f64],
    bundle: &BrownianBundle,
    k: usize,
    dt: f64,
    out: &mut [f64],
) -> Result<()> {
    let n = coeffs.f0.len();
    let d = coeffs.f3.ncols();
    let drift_const = &coeffs.f0 + &coeffs.f2 * mean;
    let diff_const: Vec<DVector<f64>> = if sigma_free {
        Vec::new()
    } else {
        (0..noise_dim)
            .map(|j| &coeffs.sig0[j] + &coeffs.sig2[j] * mean)
            .collect()
    };
    out.par_chunks_mut(n)
        .enumerate()
        .try_for_each(|(i, slot)| -> Result<()> {
            let x = DVector::from_column_slice(&states[i * n..(i + 1) * n]);
            let v = DVector::from_column_slice(&controls[i * d..(i + 1) * d]);
            let drift = &drift_const + &coeffs.f1 * &x + &coeffs.f3 * &v;
            for a in 0..n {
                slot[a] = x[a] + dt * drift[a];
            }
            if !sigma_free {
                let dw = bundle.increment(i, k);
                for (j, base) in diff_const.iter().enumerate() {
                    let col = base + &coeffs.sig1[j] * &x + &coeffs.sig3[j] * &v;
                    for a in 0..n {
                        slot[a] += dw[j] * col[a];
                    }
                }
            }
            if slot.iter().any(|z| !z.is_finite()) {
                return Err(Error::ForwardDiverged { step: k });
            }
            Ok(())
        })
}

/// Terminal costates: state gradient of the terminal cost plus the averaged
/// terminal measure coupling.
fn terminal_costates(
    spec: &ProblemSpec,
    states: &[f64],
    mean: &[f64],
    weights: &[f64],
    out: &mut [f64],
) {
    let n = spec.state_dim();
    let count = weights.len();
    let m = Pop::new(states, n, weights, mean);
    match spec.cost.interaction() {
        InteractionKind::General => {
            out.par_chunks_mut(n).enumerate().for_each(|(i, slot)| {
                let grad = spec.cost.d_x_term(m.atom(i), m);
                for a in 0..n {
                    slot[a] = grad[a];
                }
                // Donor loop stays serial so the sum is reproducible.
                for j in 0..count {
                    let w = weights[j];
                    let c = spec.cost.d_mp_term(m.atom(j), m, m.atom(i));
                    for a in 0..n {
                        slot[a] += w * c[a];
                    }
                }
            });
        }
        kind => {
            // Mean-coupled probe gradients do not depend on the probe, so
            // one donor sweep evaluated at the mean serves every particle.
            let mut coupling = DVector::zeros(n);
            if let InteractionKind::MeanCoupled = kind {
                for j in 0..count {
                    coupling.axpy(weights[j], &spec.cost.d_mp_term(m.atom(j), m, mean), 1.0);
                }
            }
            out.par_chunks_mut(n).enumerate().for_each(|(i, slot)| {
                let grad = spec.cost.d_x_term(m.atom(i), m);
                for a in 0..n {
                    slot[a] = grad[a] + coupling[a];
                }
            });
        }
    }
}

/// Backward driver at one knot: per particle the state gradient of the
/// Hamiltonian at its minimizer plus the ensemble-averaged measure
/// coupling, all multiplied by `scale` (homotopy stages solve a driver
/// damped toward the terminal-only problem).
#[allow(clippy::too_many_arguments)]
fn assemble_driver(
    spec: &ProblemSpec,
    coeffs: &DynCoeffs,
    s: f64,
    states: &[f64],
    mean: &[f64],
    weights: &[f64],
    p: &[f64],
    q: &[f64],
    v: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    let m = Pop::new(states, n, weights, mean);
    // Averaged costates, serial in particle order.
    let mut pbar = vec![0.0; n];
    let mut qbar = vec![0.0; n * noise];
    for (i, &w) in weights.iter().enumerate() {
        for a in 0..n {
            pbar[a] += w * p[i * n + a];
        }
        let qi = &q[i * n * noise..(i + 1) * n * noise];
        for (slot, &val) in qbar.iter_mut().zip(qi) {
            *slot += w * val;
        }
    }
    // Coupling every particle sees: transposed mean blocks against the
    // averaged costates, plus the averaged cost coupling when it is
    // probe-independent.
    let mut avg = vec![0.0; n];
    mat_t_vec_acc(&coeffs.f2, &pbar, &mut avg);
    for j in 0..noise {
        mat_t_vec_acc(&coeffs.sig2[j], &qbar[j * n..(j + 1) * n], &mut avg);
    }
    let interaction = spec.cost.interaction();
    if let InteractionKind::MeanCoupled = interaction {
        let mut acc = vec![0.0; n];
        for (j, &w) in weights.iter().enumerate() {
            let c = spec
                .cost
                .d_mp(m.atom(j), m, &v[j * d..(j + 1) * d], s, mean);
            for a in 0..n {
                acc[a] += w * c[a];
            }
        }
        for a in 0..n {
            avg[a] += acc[a];
        }
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, slot)| {
        let xi = &states[i * n..(i + 1) * n];
        let vi = &v[i * d..(i + 1) * d];
        let qi = &q[i * n * noise..(i + 1) * n * noise];
        let mut total = avg.clone();
        mat_t_vec_acc(&coeffs.f1, &p[i * n..(i + 1) * n], &mut total);
        for j in 0..noise {
            mat_t_vec_acc(&coeffs.sig1[j], &qi[j * n..(j + 1) * n], &mut total);
        }
        let gx = spec.cost.d_x(xi, m, vi, s);
        for a in 0..n {
            total[a] += gx[a];
        }
        if let InteractionKind::General = interaction {
            // Full pairwise coupling; the donor loop stays serial inside
            // each particle so sums are reproducible.
            for (j, &w) in weights.iter().enumerate() {
                let c = spec.cost.d_mp(m.atom(j), m, &v[j * d..(j + 1) * d], s, xi);
                for a in 0..n {
                    total[a] += w * c[a];
                }
            }
        }
        for a in 0..n {
            slot[a] = scale * total[a];
        }
    });
}

/// Hamiltonian minimizers of a whole knot from given costate slices.
#[allow(clippy::too_many_arguments)]
fn minimize_knot(
    spec: &ProblemSpec,
    states: &[f64],
    mean: &[f64],
    weights: &[f64],
    s: f64,
    p: &[f64],
    q: &[f64],
    warm: &[f64],
    copts: &ControlOptions,
    out: &mut [f64],
) -> Result<()> {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    let pop = Pop::new(states, n, weights, mean);
    out.par_chunks_mut(d)
        .enumerate()
        .try_for_each(|(i, slot)| -> Result<()> {
            let x = DVector::from_column_slice(&states[i * n..(i + 1) * n]);
            let pv = DVector::from_column_slice(&p[i * n..(i + 1) * n]);
            let qm = DMatrix::from_column_slice(n, noise, &q[i * n * noise..(i + 1) * n * noise]);
            let v0 = DVector::from_column_slice(&warm[i * d..(i + 1) * d]);
            let sol = minimize_control_from(spec, &x, pop, s, &pv, &qm, &v0, copts)?;
            slot.copy_from_slice(sol.v_hat.as_slice());
            Ok(())
        })
}

// ---------------------------------------------------------------------------
// Forward pass

/// Simulates the ensemble forward under the costate fields predicted by
/// `policy`, minimizing the Hamiltonian pointwise for the control.
pub fn forward_pass(
    spec: &ProblemSpec,
    ensemble: &ParticleEnsemble,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    policy: &PolicyRepresentation,
    copts: &ControlOptions,
) -> Result<ForwardResult> {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    let count = ensemble.len();
    let steps = grid.steps;
    if ensemble.dim() != n {
        return Err(Error::dim(
            "forward_pass ensemble",
            format!("dimension {n}"),
            format!("{}", ensemble.dim()),
        ));
    }
    if bundle.particles() != count || bundle.steps() != steps || bundle.noise_dim() != noise {
        return Err(Error::dim(
            "forward_pass bundle",
            format!("{count} particles x {steps} steps x {noise} noise dims"),
            format!(
                "{} particles x {} steps x {} noise dims",
                bundle.particles(),
                bundle.steps(),
                bundle.noise_dim()
            ),
        ));
    }
    if policy.input_dim != n || policy.p_dim != n || policy.q_dim != n * noise {
        return Err(Error::dim(
            "forward_pass policy",
            format!("input {n}, costate {n}, martingale {}", n * noise),
            format!(
                "input {}, costate {}, martingale {}",
                policy.input_dim, policy.p_dim, policy.q_dim
            ),
        ));
    }
    if policy.knots() != steps + 1 {
        return Err(Error::dim(
            "forward_pass policy",
            format!("{} knots", steps + 1),
            format!("{}", policy.knots()),
        ));
    }
    let sigma_free = sigma_identically_zero(spec, grid);
    let weights = ensemble.weights().to_vec();
    let dt = grid.dt();
    let bsize = policy.basis.feature_count(n);
    let mut y = KnotField::zeros(steps + 1, count, n);
    y.knot_slice_mut(0).copy_from_slice(ensemble.atoms_flat());
    let mut v = KnotField::zeros(steps, count, d);
    let mut means = Vec::with_capacity(steps + 1);
    let mut warm = vec![0.0; count * d];
    for k in 0..steps {
        let s = grid.knot(k);
        let coeffs = spec.dynamics.coeffs_at(s);
        let mean = y.weighted_mean(k, &weights);
        // Controls from the predicted costates, warm started from the
        // previous knot.
        {
            let yk = y.knot_slice(k);
            let pop = Pop::new(yk, n, &weights, mean.as_slice());
            let vk = v.knot_slice_mut(k);
            vk.par_chunks_mut(d)
                .enumerate()
                .try_for_each(|(i, slot)| -> Result<()> {
                    let u = &yk[i * n..(i + 1) * n];
                    let mut feat = vec![0.0; bsize];
                    let mut pbuf = vec![0.0; n];
                    let mut qbuf = vec![0.0; n * noise];
                    policy.eval_p_into(k, u, &mut feat, &mut pbuf);
                    policy.eval_q_into(k, u, &mut feat, &mut qbuf);
                    let x = DVector::from_column_slice(u);
                    let pv = DVector::from_column_slice(&pbuf);
                    let qm = DMatrix::from_column_slice(n, noise, &qbuf);
                    let v0 = DVector::from_column_slice(&warm[i * d..(i + 1) * d]);
                    let sol = minimize_control_from(spec, &x, pop, s, &pv, &qm, &v0, copts)?;
                    slot.copy_from_slice(sol.v_hat.as_slice());
                    Ok(())
                })?;
        }
        warm.copy_from_slice(v.knot_slice(k));
        {
            let (yk, yk1) = y.step_pair_mut(k);
            euler_step_knot(
                &coeffs,
                noise,
                sigma_free,
                yk,
                &mean,
                v.knot_slice(k),
                bundle,
                k,
                dt,
                yk1,
            )?;
        }
        means.push(mean);
    }
    means.push(y.weighted_mean(steps, &weights));
    Ok(ForwardResult {
        y,
        v,
        means,
        weights,
    })
}

// ---------------------------------------------------------------------------
// Backward pass

struct BackwardSweep {
    p: KnotField,
    q: KnotField,
    v_hat: KnotField,
    policy: PolicyRepresentation,
}

/// One backward regression sweep over stored forward trajectories. The
/// recursion is fully explicit: targets at knot `k` are built from data at
/// knot `k + 1`, so each knot needs exactly one design factorization.
fn backward_sweep(
    spec: &ProblemSpec,
    fwd: &ForwardResult,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    basis: BasisId,
    copts: &ControlOptions,
    scale: f64,
) -> Result<BackwardSweep> {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    let count = fwd.weights.len();
    let steps = grid.steps;
    let qd = n * noise;
    let sigma_free = sigma_identically_zero(spec, grid);
    let dt = grid.dt();
    let weights = &fwd.weights;
    let bsize = basis.feature_count(n);
    let mut p = KnotField::zeros(steps + 1, count, n);
    let mut q = KnotField::zeros(steps + 1, count, qd);
    let mut v_hat = KnotField::zeros(steps, count, d);
    let mut policy = PolicyRepresentation::zeros(basis, n, n, qd, steps + 1);

    // Terminal knot: exact condition, plus a fit so the policy predicts at
    // every knot (exact for affine terminal gradients).
    {
        let yk = fwd.y.knot_slice(steps);
        let mean = fwd.means[steps].as_slice();
        terminal_costates(spec, yk, mean, weights, p.knot_slice_mut(steps));
        let coef = fit_knot(basis, yk, n, weights, p.knot_slice(steps), n)?;
        policy.set_p(steps, coef);
    }
    // Terminal controls close the driver at the last knot; the martingale
    // field vanishes there by convention.
    let mut v_term = vec![0.0; count * d];
    minimize_knot(
        spec,
        fwd.y.knot_slice(steps),
        fwd.means[steps].as_slice(),
        weights,
        grid.knot(steps),
        p.knot_slice(steps),
        q.knot_slice(steps),
        fwd.v.knot_slice(steps - 1),
        copts,
        &mut v_term,
    )?;
    let mut driver = vec![0.0; count * n];
    {
        let s_end = grid.knot(steps);
        let coeffs = spec.dynamics.coeffs_at(s_end);
        assemble_driver(
            spec,
            &coeffs,
            s_end,
            fwd.y.knot_slice(steps),
            fwd.means[steps].as_slice(),
            weights,
            p.knot_slice(steps),
            q.knot_slice(steps),
            &v_term,
            scale,
            &mut driver,
        );
    }

    let target_dim = if sigma_free { n } else { n + qd };
    let mut targets = vec![0.0; count * target_dim];
    for k in (0..steps).rev() {
        // Regression targets from knot k + 1.
        {
            let pk1 = p.knot_slice(k + 1);
            targets
                .par_chunks_mut(target_dim)
                .enumerate()
                .for_each(|(i, row)| {
                    let pnext = &pk1[i * n..(i + 1) * n];
                    let drv = &driver[i * n..(i + 1) * n];
                    for a in 0..n {
                        row[a] = pnext[a] + drv[a] * dt;
                    }
                    if !sigma_free {
                        let dw = bundle.increment(i, k);
                        for j in 0..noise {
                            for a in 0..n {
                                row[n + j * n + a] = pnext[a] * dw[j] / dt;
                            }
                        }
                    }
                });
        }
        let yk = fwd.y.knot_slice(k);
        let coef = fit_knot(basis, yk, n, weights, &targets, target_dim)?;
        let pcoef = coef.rows(0, n).into_owned();
        let qcoef = if sigma_free {
            DMatrix::zeros(qd, bsize)
        } else {
            coef.rows(n, qd).into_owned()
        };
        policy.set_p(k, pcoef);
        policy.set_q(k, qcoef);
        // Stored fields are the fitted predictions at the design points.
        {
            let pk = p.knot_slice_mut(k);
            let qk = q.knot_slice_mut(k);
            pk.par_chunks_mut(n)
                .zip(qk.par_chunks_mut(qd))
                .enumerate()
                .for_each(|(i, (pp, qq))| {
                    let mut feat = vec![0.0; bsize];
                    let u = &yk[i * n..(i + 1) * n];
                    policy.eval_p_into(k, u, &mut feat, pp);
                    if !sigma_free {
                        policy.eval_q_into(k, u, &mut feat, qq);
                    }
                });
        }
        minimize_knot(
            spec,
            yk,
            fwd.means[k].as_slice(),
            weights,
            grid.knot(k),
            p.knot_slice(k),
            q.knot_slice(k),
            fwd.v.knot_slice(k),
            copts,
            v_hat.knot_slice_mut(k),
        )?;
        if k > 0 {
            let s = grid.knot(k);
            let coeffs = spec.dynamics.coeffs_at(s);
            assemble_driver(
                spec,
                &coeffs,
                s,
                yk,
                fwd.means[k].as_slice(),
                weights,
                p.knot_slice(k),
                q.knot_slice(k),
                v_hat.knot_slice(k),
                scale,
                &mut driver,
            );
        }
    }
    Ok(BackwardSweep {
        p,
        q,
        v_hat,
        policy,
    })
}

/// Sup over knots of the weighted L2 distance between the costate fields
/// of a fresh sweep and the predictions of the previous policy on the same
/// trajectories. Serial so iteration counts are scheduling-independent.
fn prediction_distance(old: &PolicyRepresentation, sweep: &BackwardSweep, fwd: &ForwardResult) -> f64 {
    let n = sweep.p.dim();
    let qd = sweep.q.dim();
    let bsize = old.basis.feature_count(old.input_dim);
    let mut feat = vec![0.0; bsize];
    let mut pbuf = vec![0.0; n];
    let mut qbuf = vec![0.0; qd];
    let mut worst = 0.0f64;
    for k in 0..sweep.p.knots() {
        let yk = fwd.y.knot_slice(k);
        let mut acc = 0.0;
        for (i, &w) in fwd.weights.iter().enumerate() {
            let u = &yk[i * n..(i + 1) * n];
            old.eval_p_into(k, u, &mut feat, &mut pbuf);
            for (a, &pa) in sweep.p.at(k, i).iter().enumerate() {
                let dev = pa - pbuf[a];
                acc += w * dev * dev;
            }
            old.eval_q_into(k, u, &mut feat, &mut qbuf);
            for (a, &qa) in sweep.q.at(k, i).iter().enumerate() {
                let dev = qa - qbuf[a];
                acc += w * dev * dev;
            }
        }
        worst = worst.max(acc.sqrt());
    }
    worst
}

// ---------------------------------------------------------------------------
// Picard iteration and continuation

fn finalize(
    spec: &ProblemSpec,
    ensemble: &ParticleEnsemble,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    opts: &SolverOptions,
    policy: PolicyRepresentation,
    iterations: usize,
    deltas: Vec<f64>,
) -> Result<FbsdeSolution> {
    // One closing forward sweep under the converged policy makes the
    // stored tuple self-consistent; see the struct docs.
    let fwd = forward_pass(spec, ensemble, grid, bundle, &policy, &opts.control)?;
    let n = spec.state_dim();
    let noise = spec.noise_dim();
    let qd = n * noise;
    let count = fwd.weights.len();
    let steps = grid.steps;
    let sigma_free = sigma_identically_zero(spec, grid);
    let bsize = policy.basis.feature_count(n);
    let mut p = KnotField::zeros(steps + 1, count, n);
    let mut q = KnotField::zeros(steps + 1, count, qd);
    for k in 0..steps {
        let yk = fwd.y.knot_slice(k);
        let pk = p.knot_slice_mut(k);
        let qk = q.knot_slice_mut(k);
        pk.par_chunks_mut(n)
            .zip(qk.par_chunks_mut(qd))
            .enumerate()
            .for_each(|(i, (pp, qq))| {
                let mut feat = vec![0.0; bsize];
                let u = &yk[i * n..(i + 1) * n];
                policy.eval_p_into(k, u, &mut feat, pp);
                if !sigma_free {
                    policy.eval_q_into(k, u, &mut feat, qq);
                }
            });
    }
    terminal_costates(
        spec,
        fwd.y.knot_slice(steps),
        fwd.means[steps].as_slice(),
        &fwd.weights,
        p.knot_slice_mut(steps),
    );
    Ok(FbsdeSolution {
        grid: *grid,
        seed: opts.seed,
        weights: fwd.weights,
        means: fwd.means,
        y: fwd.y,
        p,
        q,
        v_hat: fwd.v,
        policy,
        diagnostics: SolveDiagnostics {
            iterations,
            deltas,
            converged: true,
            continuation: Vec::new(),
        },
    })
}

fn picard_stage(
    spec: &ProblemSpec,
    ensemble: &ParticleEnsemble,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    opts: &SolverOptions,
    scale: f64,
    init: Option<PolicyRepresentation>,
) -> Result<FbsdeSolution> {
    opts.validate()?;
    let n = spec.state_dim();
    let qd = n * spec.noise_dim();
    let zero = PolicyRepresentation::zeros(opts.basis, n, n, qd, grid.steps + 1);
    let mut policy = match init {
        Some(provided) => {
            if !provided.same_shape(&zero) {
                return Err(Error::InvalidArgument {
                    context: "picard_stage",
                    detail: "warm-start policy shape does not match the problem".into(),
                });
            }
            provided
        }
        None => zero,
    };
    let mut deltas = Vec::new();
    for iter in 1..=opts.picard_max {
        let fwd = forward_pass(spec, ensemble, grid, bundle, &policy, &opts.control)?;
        let sweep = backward_sweep(spec, &fwd, grid, bundle, opts.basis, &opts.control, scale)?;
        let delta = prediction_distance(&policy, &sweep, &fwd);
        deltas.push(delta);
        if delta <= opts.picard_tol {
            return finalize(
                spec,
                ensemble,
                grid,
                bundle,
                opts,
                sweep.policy,
                iter,
                deltas,
            );
        }
        policy.blend_from(opts.damping, &sweep.policy);
    }
    let last_delta = *deltas.last().expect("picard_max >= 1");
    Err(Error::PicardDiverged {
        iterations: opts.picard_max,
        last_delta,
        deltas,
    })
}

/// Solves the coupled system by damped Picard iteration at full coupling.
pub fn picard_solve(
    spec: &ProblemSpec,
    ensemble: &ParticleEnsemble,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    opts: &SolverOptions,
) -> Result<FbsdeSolution> {
    picard_stage(spec, ensemble, grid, bundle, opts, 1.0, None)
}

/// Solves through a homotopy in the driver scale. The schedule ramps the
/// scale to 1 in `continuation_steps` stages, warm starting each stage from
/// the previous policy; a failing stage is bisected (each gap at most six
/// times) before giving up. With one stage and a converging Picard
/// iteration this is identical to [`picard_solve`].
pub fn continuation_solve(
    spec: &ProblemSpec,
    ensemble: &ParticleEnsemble,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    opts: &SolverOptions,
) -> Result<FbsdeSolution> {
    opts.validate()?;
    let stages = opts.continuation_steps;
    let mut queue: VecDeque<(f64, usize)> = (1..=stages)
        .map(|m| (m as f64 / stages as f64, 0usize))
        .collect();
    let mut current = 0.0;
    let mut policy: Option<PolicyRepresentation> = None;
    let mut traversed = Vec::new();
    let mut last: Option<FbsdeSolution> = None;
    while let Some((target, depth)) = queue.pop_front() {
        match picard_stage(spec, ensemble, grid, bundle, opts, target, policy.clone()) {
            Ok(sol) => {
                current = target;
                traversed.push(target);
                policy = Some(sol.policy.clone());
                last = Some(sol);
            }
            Err(_) if depth < 6 => {
                let mid = 0.5 * (current + target);
                queue.push_front((target, depth + 1));
                queue.push_front((mid, depth + 1));
            }
            Err(_) => {
                return Err(Error::ContinuationFailed {
                    rho_from: current,
                    rho_to: target,
                    depth,
                });
            }
        }
    }
    let mut sol = last.expect("schedule has at least one stage");
    sol.diagnostics.continuation = traversed;
    Ok(sol)
}

// ---------------------------------------------------------------------------
// Residuals

/// Pathwise consistency report of a stored solution.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// Sup over knots of the weighted RMS gap between the stored states
    /// and a re-simulation under the stored controls with the same
    /// increments. Zero at convergence.
    pub forward_sup: f64,
    /// Per-step weighted RMS one-step costate defect
    /// `|P(k+1) + Driver(k+1) dt - P(k)|`; scales like the square root of
    /// the step size times the martingale field.
    pub backward: Vec<f64>,
    pub backward_sup: f64,
    /// Per-step norm of the ensemble-averaged martingale increment defect;
    /// decays like one over the square root of the particle count.
    pub martingale: Vec<f64>,
    pub martingale_sup: f64,
    /// Largest control-gradient norm at the stored minimizers.
    pub foc_max: f64,
}

/// Controls at the terminal knot, recovered by minimizing the Hamiltonian
/// at the stored terminal costate. Flow systems and residual checks need
/// the final-knot minimizer, which the solution does not store.
pub fn terminal_controls(
    spec: &ProblemSpec,
    sol: &FbsdeSolution,
    copts: &ControlOptions,
) -> Result<Vec<f64>> {
    let steps = sol.grid.steps;
    let count = sol.weights.len();
    let mut out = vec![0.0; count * spec.control_dim()];
    minimize_knot(
        spec,
        sol.y.knot_slice(steps),
        sol.means[steps].as_slice(),
        &sol.weights,
        sol.grid.knot(steps),
        sol.p.knot_slice(steps),
        sol.q.knot_slice(steps),
        sol.v_hat.knot_slice(steps - 1),
        copts,
        &mut out,
    )?;
    Ok(out)
}

/// Evaluates the defect of a stored solution against the discrete system
/// it claims to solve, using the same increments the solve consumed.
pub fn residuals(
    spec: &ProblemSpec,
    sol: &FbsdeSolution,
    bundle: &BrownianBundle,
) -> Result<ResidualReport> {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    let count = sol.weights.len();
    let steps = sol.grid.steps;
    if bundle.particles() != count || bundle.steps() != steps || bundle.noise_dim() != noise {
        return Err(Error::dim(
            "residuals bundle",
            format!("{count} particles x {steps} steps x {noise} noise dims"),
            format!(
                "{} particles x {} steps x {} noise dims",
                bundle.particles(),
                bundle.steps(),
                bundle.noise_dim()
            ),
        ));
    }
    let grid = sol.grid;
    let dt = grid.dt();
    let sigma_free = sigma_identically_zero(spec, &grid);
    let weights = &sol.weights;

    // (a) Forward reconstruction under the stored controls, stepping with
    // the same kernel as the solver so agreement is exact at convergence.
    let mut forward_sup = 0.0f64;
    {
        let mut resim = KnotField::zeros(steps + 1, count, n);
        resim
            .knot_slice_mut(0)
            .copy_from_slice(sol.y.knot_slice(0));
        for k in 0..steps {
            let coeffs = spec.dynamics.coeffs_at(grid.knot(k));
            let mean = resim.weighted_mean(k, weights);
            let (rk, rk1) = resim.step_pair_mut(k);
            euler_step_knot(
                &coeffs,
                noise,
                sigma_free,
                rk,
                &mean,
                sol.v_hat.knot_slice(k),
                bundle,
                k,
                dt,
                rk1,
            )?;
        }
        for k in 0..=steps {
            let mut acc = 0.0;
            for (i, &w) in weights.iter().enumerate() {
                let stored = sol.y.at(k, i);
                let re = resim.at(k, i);
                for a in 0..n {
                    let dev = stored[a] - re[a];
                    acc += w * dev * dev;
                }
            }
            forward_sup = forward_sup.max(acc.sqrt());
        }
    }

    // (b), (c): one-step costate and martingale defects against the driver
    // at the later knot.
    let v_term = terminal_controls(spec, sol, &ControlOptions::default())?;
    let mut backward = Vec::with_capacity(steps);
    let mut martingale = Vec::with_capacity(steps);
    let mut driver = vec![0.0; count * n];
    for k in 0..steps {
        let knext = k + 1;
        let s = grid.knot(knext);
        let coeffs = spec.dynamics.coeffs_at(s);
        let v_slice: &[f64] = if knext == steps {
            &v_term
        } else {
            sol.v_hat.knot_slice(knext)
        };
        assemble_driver(
            spec,
            &coeffs,
            s,
            sol.y.knot_slice(knext),
            sol.means[knext].as_slice(),
            weights,
            sol.p.knot_slice(knext),
            sol.q.knot_slice(knext),
            v_slice,
            1.0,
            &mut driver,
        );
        let mut acc = 0.0;
        let mut defect_mean = vec![0.0; n];
        for (i, &w) in weights.iter().enumerate() {
            let pnext = sol.p.at(knext, i);
            let pcur = sol.p.at(k, i);
            let drv = &driver[i * n..(i + 1) * n];
            let qcur = sol.q.at(k, i);
            let dw = bundle.increment(i, k);
            for a in 0..n {
                let one_step = pnext[a] + drv[a] * dt - pcur[a];
                acc += w * one_step * one_step;
                let mut mart = one_step;
                for j in 0..noise {
                    mart -= qcur[j * n + a] * dw[j];
                }
                defect_mean[a] += w * mart;
            }
        }
        backward.push(acc.sqrt());
        martingale.push(defect_mean.iter().map(|z| z * z).sum::<f64>().sqrt());
    }
    let backward_sup = backward.iter().cloned().fold(0.0f64, f64::max);
    let martingale_sup = martingale.iter().cloned().fold(0.0f64, f64::max);

    // (d) First-order condition at the stored controls and costates.
    let mut foc_max = 0.0f64;
    for k in 0..steps {
        let s = grid.knot(k);
        let coeffs = spec.dynamics.coeffs_at(s);
        let yk = sol.y.knot_slice(k);
        let pop = Pop::new(yk, n, weights, sol.means[k].as_slice());
        let mut grad = vec![0.0; d];
        for i in 0..count {
            grad.fill(0.0);
            mat_t_vec_acc(&coeffs.f3, sol.p.at(k, i), &mut grad);
            let qi = sol.q.at(k, i);
            for j in 0..noise {
                mat_t_vec_acc(&coeffs.sig3[j], &qi[j * n..(j + 1) * n], &mut grad);
            }
            let gv = spec
                .cost
                .d_v(&yk[i * n..(i + 1) * n], pop, sol.v_hat.at(k, i), s);
            let mut norm_sq = 0.0;
            for a in 0..d {
                let total = grad[a] + gv[a];
                norm_sq += total * total;
            }
            foc_max = foc_max.max(norm_sq.sqrt());
        }
    }

    Ok(ResidualReport {
        forward_sup,
        backward,
        backward_sup,
        martingale,
        martingale_sup,
        foc_max,
    })
}

// ---------------------------------------------------------------------------
// Monotonicity certificate

/// Sampled check of the coercivity inequality behind the convergence
/// theory: across random ensemble tuples the dissipation of the coupled
/// drivers must be dominated by the strong convexity of the cost in the
/// control, up to a Lipschitz cross term.
#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub tuples: usize,
    pub atoms: usize,
    /// Sampled strong-convexity modulus of the running cost.
    pub lambda: f64,
    /// Sampled Lipschitz bound of the lifted running-cost gradient.
    pub lipschitz: f64,
    /// Coefficient in front of the state and costate deviation norms.
    pub alpha: f64,
    /// Smallest slack of the inequality over all tuples; negative values
    /// beyond roundoff are counted as violations.
    pub worst_margin: f64,
    pub violations: usize,
}

/// Verifies the driver monotonicity structure on `tuples` random ensemble
/// pairs of `atoms` particles each. Deterministic in `seed`.
pub fn monotonicity_certificate(
    spec: &ProblemSpec,
    tuples: usize,
    atoms: usize,
    seed: u64,
) -> Result<MonotonicityReport> {
    if tuples == 0 || atoms == 0 {
        return Err(Error::InvalidArgument {
            context: "monotonicity_certificate",
            detail: "need at least one tuple and one atom".into(),
        });
    }
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    let horizon = spec.horizon;
    let lambda = estimate_convexity(spec, 256, seed)?.lambda_hat;
    if !(lambda > 0.0) {
        return Err(Error::Unsupported {
            detail: format!("certificate requires a strongly convex running cost, sampled modulus {lambda:.3e}"),
        });
    }
    let weights = vec![1.0 / atoms as f64; atoms];
    let copts = ControlOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, StreamPurpose::Validation, 7));
    let draw = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    };

    // Gradient of the lifted running cost over the weighted product space:
    // own-state gradient plus the averaged probe gradient of the measure
    // coupling.
    let lifted_grad = |states: &[f64], mean: &[f64], v: &[f64], s: f64| -> Vec<f64> {
        let m = Pop::new(states, n, &weights, mean);
        let mut out = vec![0.0; atoms * n];
        for i in 0..atoms {
            let slot = &mut out[i * n..(i + 1) * n];
            let gx = spec.cost.d_x(m.atom(i), m, &v[i * d..(i + 1) * d], s);
            for a in 0..n {
                slot[a] = gx[a];
            }
            for j in 0..atoms {
                let c = spec
                    .cost
                    .d_mp(m.atom(j), m, &v[j * d..(j + 1) * d], s, m.atom(i));
                for a in 0..n {
                    slot[a] += weights[j] * c[a];
                }
            }
        }
        out
    };
    let wnorm_sq = |x: &[f64], block: usize| -> f64 {
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            for a in 0..block {
                let z = x[i * block + a];
                acc += w * z * z;
            }
        }
        acc
    };

    // Lipschitz bound of the lifted gradient in state and control, sampled
    // on an independent pre-pass.
    let mut lipschitz = 0.0f64;
    for _ in 0..256 {
        let s = rng.gen::<f64>() * horizon;
        let xa = draw(atoms * n, &mut rng);
        let xb = draw(atoms * n, &mut rng);
        let va = draw(atoms * d, &mut rng);
        let vb = draw(atoms * d, &mut rng);
        let mean_a = weighted_mean_flat(&xa, n, &weights);
        let mean_b = weighted_mean_flat(&xb, n, &weights);
        let ga = lifted_grad(&xa, mean_a.as_slice(), &va, s);
        let gb = lifted_grad(&xb, mean_b.as_slice(), &vb, s);
        let dg: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = xa.iter().zip(&xb).map(|(a, b)| a - b).collect();
        let dv: Vec<f64> = va.iter().zip(&vb).map(|(a, b)| a - b).collect();
        let denom = (wnorm_sq(&dx, n) + wnorm_sq(&dv, d)).sqrt();
        if denom > 1e-12 {
            lipschitz = lipschitz.max(wnorm_sq(&dg, n).sqrt() / denom);
        }
    }
    // Splitting the cross term C |dX| (|dX| + |dV|) with Young's
    // inequality against lambda |dV|^2 leaves this coefficient on the
    // quadratic deviation norms.
    let alpha = lipschitz + lipschitz * lipschitz / (4.0 * lambda);

    let mut worst_margin = f64::INFINITY;
    let mut violations = 0usize;
    let mut drv_a = vec![0.0; atoms * n];
    let mut drv_b = vec![0.0; atoms * n];
    for _ in 0..tuples {
        let s = rng.gen::<f64>() * horizon;
        let coeffs = spec.dynamics.coeffs_at(s);
        let xa = draw(atoms * n, &mut rng);
        let xb = draw(atoms * n, &mut rng);
        let pa = draw(atoms * n, &mut rng);
        let pb = draw(atoms * n, &mut rng);
        let qa = draw(atoms * n * noise, &mut rng);
        let qb = draw(atoms * n * noise, &mut rng);
        let mean_a = weighted_mean_flat(&xa, n, &weights);
        let mean_b = weighted_mean_flat(&xb, n, &weights);
        let zero_warm = vec![0.0; atoms * d];
        let mut va = vec![0.0; atoms * d];
        let mut vb = vec![0.0; atoms * d];
        minimize_knot(
            spec,
            &xa,
            mean_a.as_slice(),
            &weights,
            s,
            &pa,
            &qa,
            &zero_warm,
            &copts,
            &mut va,
        )?;
        minimize_knot(
            spec,
            &xb,
            mean_b.as_slice(),
            &weights,
            s,
            &pb,
            &qb,
            &zero_warm,
            &copts,
            &mut vb,
        )?;
        assemble_driver(
            spec,
            &coeffs,
            s,
            &xa,
            mean_a.as_slice(),
            &weights,
            &pa,
            &qa,
            &va,
            1.0,
            &mut drv_a,
        );
        assemble_driver(
            spec,
            &coeffs,
            s,
            &xb,
            mean_b.as_slice(),
            &weights,
            &pb,
            &qb,
            &vb,
            1.0,
            &mut drv_b,
        );
        // Pairings of the coupled monotonicity form. The backward field
        // enters with a minus sign relative to the assembled driver.
        let mut lhs = 0.0;
        let mut dx2 = 0.0;
        let mut dp2 = 0.0;
        let mut dq2 = 0.0;
        let mut dv2 = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            let xai = DVector::from_column_slice(&xa[i * n..(i + 1) * n]);
            let xbi = DVector::from_column_slice(&xb[i * n..(i + 1) * n]);
            let vai = DVector::from_column_slice(&va[i * d..(i + 1) * d]);
            let vbi = DVector::from_column_slice(&vb[i * d..(i + 1) * d]);
            let fa = spec.eval_drift(&xai, &mean_a, &vai, s)?;
            let fb = spec.eval_drift(&xbi, &mean_b, &vbi, s)?;
            for a in 0..n {
                let ddx = xb[i * n + a] - xa[i * n + a];
                let ddp = pb[i * n + a] - pa[i * n + a];
                let ddg = -(drv_b[i * n + a] - drv_a[i * n + a]);
                let ddf = fb[a] - fa[a];
                lhs += w * (ddg * ddx + ddf * ddp);
                dx2 += w * ddx * ddx;
                dp2 += w * ddp * ddp;
            }
            for j in 0..noise {
                let sa = spec.eval_diffusion_col(j, &xai, &mean_a, &vai, s)?;
                let sb = spec.eval_diffusion_col(j, &xbi, &mean_b, &vbi, s)?;
                for a in 0..n {
                    let ddq = qb[i * n * noise + j * n + a] - qa[i * n * noise + j * n + a];
                    lhs += w * (sb[a] - sa[a]) * ddq;
                    dq2 += w * ddq * ddq;
                }
            }
            for a in 0..d {
                let ddv = vb[i * d + a] - va[i * d + a];
                dv2 += w * ddv * ddv;
            }
        }
        let rhs = -lambda * dv2 + alpha * (dx2 + dp2 + dq2);
        let margin = rhs - lhs;
        if margin < -1e-9 {
            violations += 1;
        }
        worst_margin = worst_margin.min(margin);
    }
    Ok(MonotonicityReport {
        tuples,
        atoms,
        lambda,
        lipschitz,
        alpha,
        worst_margin,
        violations,
    })
}

// ---------------------------------------------------------------------------
// Affine flow systems

/// Which linearized system a flow solve represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    /// Response to an ensemble-wide state perturbation direction.
    Gateaux,
    /// One column of the pathwise state Jacobian.
    Spatial { column: usize },
    /// Response to mass injected at an auxiliary anchor point.
    Measure,
    /// One column of the anchor gradient of the measure response.
    MeasureSpatial { column: usize },
}

/// Read-only view of one knot handed to flow drivers: base solution
/// fields, the current flow fields, and their weighted averages, all flat
/// `[particle][component]` slices. During the forward sweep the `dv`
/// slots are empty while the driver is being asked to produce the control
/// variation; in [`AffineFlowDriver::terminal`] the flow costate slots
/// hold zeros.
pub struct FlowFrame<'a> {
    pub k: usize,
    pub s: f64,
    pub coeffs: &'a DynCoeffs,
    pub y: &'a [f64],
    pub v: &'a [f64],
    pub p: &'a [f64],
    pub q: &'a [f64],
    pub mean: &'a [f64],
    pub weights: &'a [f64],
    pub dy: &'a [f64],
    pub dv: &'a [f64],
    pub dp: &'a [f64],
    pub dq: &'a [f64],
    pub dy_avg: &'a [f64],
    pub dv_avg: &'a [f64],
    pub dp_avg: &'a [f64],
    pub dq_avg: &'a [f64],
}

/// Coefficient callbacks of one affine linear system along a base
/// solution. Implementations own whatever base data they need (the base
/// solution, direction fields, frozen anchor trajectories) and must be
/// pure functions of the frame: the solver calls them from worker threads
/// in arbitrary order.
pub trait AffineFlowDriver: Sync {
    fn kind(&self) -> FlowKind;
    /// Anchor point of the perturbation, recorded on the solution. Only
    /// measure-derivative systems have one.
    fn anchor(&self) -> Option<DVector<f64>> {
        None
    }
    /// Initial flow state of particle `i`.
    fn initial(&self, i: usize) -> DVector<f64>;
    /// First-order control response of particle `i` given the frame's
    /// flow costates. Must not read `frame.dv`.
    fn control_variation(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>>;
    /// Drift of the flow state.
    fn forward_drift(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>>;
    /// Diffusion column `j` of the flow state. Only called when the base
    /// dynamics carry noise.
    fn forward_diffusion(&self, frame: &FlowFrame<'_>, i: usize, j: usize) -> Result<DVector<f64>>;
    /// Terminal flow costate. The frame's flow costate and variation
    /// slots hold zeros.
    fn terminal(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>>;
    /// Driver of the flow costate: the regression target one knot earlier
    /// is `dp + driver * dt` plus the martingale correction.
    fn backward_driver(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>>;
}

/// Solution of one affine flow system along a base solution.
#[derive(Debug, Clone)]
pub struct LinearFlowSolution {
    pub kind: FlowKind,
    /// Anchor point of a measure-derivative system; `None` for flows
    /// without one.
    pub anchor: Option<DVector<f64>>,
    pub grid: TimeGrid,
    /// Flow states, `steps + 1` knots.
    pub dy: KnotField,
    /// Flow costates, `steps + 1` knots; terminal knot from the terminal
    /// operator.
    pub dp: KnotField,
    /// Flow martingale fields, `steps + 1` knots.
    pub dq: KnotField,
    /// Control variations on each step interval, `steps` knots.
    pub dv: KnotField,
    pub diagnostics: SolveDiagnostics,
}

struct FlowFields {
    dy: KnotField,
    dv: KnotField,
    dp: KnotField,
    dq: KnotField,
    term_dv: Vec<f64>,
}

fn flow_avg(flat: &[f64], dim: usize, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (i, &w) in weights.iter().enumerate() {
        let row = &flat[i * dim..(i + 1) * dim];
        for a in 0..dim {
            out[a] += w * row[a];
        }
    }
    out
}

/// Forward sweep of a flow system under the current flow policy. The
/// regression inputs concatenate base state and flow state, so with the
/// affine basis the fitted family is affine in both, which is exact for
/// linear-quadratic data.
fn flow_forward(
    spec: &ProblemSpec,
    base: &FbsdeSolution,
    driver: &dyn AffineFlowDriver,
    bundle: &BrownianBundle,
    policy: &PolicyRepresentation,
    term_v: &[f64],
    sigma_free: bool,
) -> Result<FlowFields> {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    let qd = n * noise;
    let count = base.weights.len();
    let grid = base.grid;
    let steps = grid.steps;
    let dt = grid.dt();
    let weights: &[f64] = &base.weights;
    let bsize = policy.basis.feature_count(2 * n);
    let mut dy = KnotField::zeros(steps + 1, count, n);
    let mut dv = KnotField::zeros(steps, count, d);
    let mut dp = KnotField::zeros(steps + 1, count, n);
    let mut dq = KnotField::zeros(steps + 1, count, qd);
    {
        let slice = dy.knot_slice_mut(0);
        for i in 0..count {
            let init = driver.initial(i);
            if init.len() != n {
                return Err(Error::dim(
                    "flow initial condition",
                    format!("{n}"),
                    format!("{}", init.len()),
                ));
            }
            slice[i * n..(i + 1) * n].copy_from_slice(init.as_slice());
        }
    }
    let mut input = vec![0.0; count * 2 * n];
    for k in 0..steps {
        let s = grid.knot(k);
        let coeffs = spec.dynamics.coeffs_at(s);
        let yk = base.y.knot_slice(k);
        let pk = base.p.knot_slice(k);
        let qk = base.q.knot_slice(k);
        let vk = base.v_hat.knot_slice(k);
        let mean = base.means[k].as_slice();
        for i in 0..count {
            input[i * 2 * n..i * 2 * n + n].copy_from_slice(&yk[i * n..(i + 1) * n]);
            input[i * 2 * n + n..(i + 1) * 2 * n].copy_from_slice(dy.at(k, i));
        }
        {
            let dpk = dp.knot_slice_mut(k);
            let dqk = dq.knot_slice_mut(k);
            dpk.par_chunks_mut(n)
                .zip(dqk.par_chunks_mut(qd))
                .enumerate()
                .for_each(|(i, (pp, qq))| {
                    let mut feat = vec![0.0; bsize];
                    let u = &input[i * 2 * n..(i + 1) * 2 * n];
                    policy.eval_p_into(k, u, &mut feat, pp);
                    if !sigma_free {
                        policy.eval_q_into(k, u, &mut feat, qq);
                    }
                });
        }
        let dy_avg = flow_avg(dy.knot_slice(k), n, weights);
        let dp_avg = flow_avg(dp.knot_slice(k), n, weights);
        let dq_avg = flow_avg(dq.knot_slice(k), qd, weights);
        {
            let frame = FlowFrame {
                k,
                s,
                coeffs: &coeffs,
                y: yk,
                v: vk,
                p: pk,
                q: qk,
                mean,
                weights,
                dy: dy.knot_slice(k),
                dv: &[],
                dp: dp.knot_slice(k),
                dq: dq.knot_slice(k),
                dy_avg: &dy_avg,
                dv_avg: &[],
                dp_avg: &dp_avg,
                dq_avg: &dq_avg,
            };
            dv.knot_slice_mut(k)
                .par_chunks_mut(d)
                .enumerate()
                .try_for_each(|(i, slot)| -> Result<()> {
                    let var = driver.control_variation(&frame, i)?;
                    slot.copy_from_slice(var.as_slice());
                    Ok(())
                })?;
        }
        let dv_avg = flow_avg(dv.knot_slice(k), d, weights);
        {
            let (dyk, dyk1) = dy.step_pair_mut(k);
            let frame = FlowFrame {
                k,
                s,
                coeffs: &coeffs,
                y: yk,
                v: vk,
                p: pk,
                q: qk,
                mean,
                weights,
                dy: dyk,
                dv: dv.knot_slice(k),
                dp: dp.knot_slice(k),
                dq: dq.knot_slice(k),
                dy_avg: &dy_avg,
                dv_avg: &dv_avg,
                dp_avg: &dp_avg,
                dq_avg: &dq_avg,
            };
            dyk1.par_chunks_mut(n)
                .enumerate()
                .try_for_each(|(i, slot)| -> Result<()> {
                    let drift = driver.forward_drift(&frame, i)?;
                    let cur = &dyk[i * n..(i + 1) * n];
                    for a in 0..n {
                        slot[a] = cur[a] + dt * drift[a];
                    }
                    if !sigma_free {
                        let dw = bundle.increment(i, k);
                        for j in 0..noise {
                            let col = driver.forward_diffusion(&frame, i, j)?;
                            for a in 0..n {
                                slot[a] += dw[j] * col[a];
                            }
                        }
                    }
                    if slot.iter().any(|z| !z.is_finite()) {
                        return Err(Error::ForwardDiverged { step: k });
                    }
                    Ok(())
                })?;
        }
    }
    // Terminal flow costate from the terminal operator, then the closing
    // control variation for the first backward driver evaluation.
    let s_end = grid.knot(steps);
    let coeffs_end = spec.dynamics.coeffs_at(s_end);
    let dy_avg = flow_avg(dy.knot_slice(steps), n, weights);
    let zeros_n = vec![0.0; count * n];
    let zeros_q = vec![0.0; count * qd];
    let zeros_d = vec![0.0; count * d];
    let zn = vec![0.0; n];
    let zq = vec![0.0; qd];
    let zd = vec![0.0; d];
    {
        let frame = FlowFrame {
            k: steps,
            s: s_end,
            coeffs: &coeffs_end,
            y: base.y.knot_slice(steps),
            v: term_v,
            p: base.p.knot_slice(steps),
            q: base.q.knot_slice(steps),
            mean: base.means[steps].as_slice(),
            weights,
            dy: dy.knot_slice(steps),
            dv: &zeros_d,
            dp: &zeros_n,
            dq: &zeros_q,
            dy_avg: &dy_avg,
            dv_avg: &zd,
            dp_avg: &zn,
            dq_avg: &zq,
        };
        dp.knot_slice_mut(steps)
            .par_chunks_mut(n)
            .enumerate()
            .try_for_each(|(i, slot)| -> Result<()> {
                let t = driver.terminal(&frame, i)?;
                slot.copy_from_slice(t.as_slice());
                Ok(())
            })?;
    }
    let dp_avg = flow_avg(dp.knot_slice(steps), n, weights);
    let dq_avg = flow_avg(dq.knot_slice(steps), qd, weights);
    let mut term_dv = vec![0.0; count * d];
    {
        let frame = FlowFrame {
            k: steps,
            s: s_end,
            coeffs: &coeffs_end,
            y: base.y.knot_slice(steps),
            v: term_v,
            p: base.p.knot_slice(steps),
            q: base.q.knot_slice(steps),
            mean: base.means[steps].as_slice(),
            weights,
            dy: dy.knot_slice(steps),
            dv: &[],
            dp: dp.knot_slice(steps),
            dq: dq.knot_slice(steps),
            dy_avg: &dy_avg,
            dv_avg: &[],
            dp_avg: &dp_avg,
            dq_avg: &dq_avg,
        };
        term_dv
            .par_chunks_mut(d)
            .enumerate()
            .try_for_each(|(i, slot)| -> Result<()> {
                let var = driver.control_variation(&frame, i)?;
                slot.copy_from_slice(var.as_slice());
                Ok(())
            })?;
    }
    Ok(FlowFields {
        dy,
        dv,
        dp,
        dq,
        term_dv,
    })
}

/// Backward regression sweep of a flow system. Consumes the forward flow
/// fields in place (costates and variations are overwritten with fitted
/// values) and returns the fresh policy.
fn flow_backward(
    spec: &ProblemSpec,
    base: &FbsdeSolution,
    driver: &dyn AffineFlowDriver,
    bundle: &BrownianBundle,
    fields: &mut FlowFields,
    term_v: &[f64],
    sigma_free: bool,
) -> Result<PolicyRepresentation> {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    let qd = n * noise;
    let count = base.weights.len();
    let grid = base.grid;
    let steps = grid.steps;
    let dt = grid.dt();
    let weights: &[f64] = &base.weights;
    let bsize = BasisId::Affine.feature_count(2 * n);
    let FlowFields {
        dy,
        dv,
        dp,
        dq,
        term_dv,
    } = fields;
    let mut fit = PolicyRepresentation::zeros(BasisId::Affine, 2 * n, n, qd, steps + 1);
    let mut input = vec![0.0; count * 2 * n];
    let fill_input = |input: &mut Vec<f64>, yk: &[f64], dyk: &[f64]| {
        for i in 0..count {
            input[i * 2 * n..i * 2 * n + n].copy_from_slice(&yk[i * n..(i + 1) * n]);
            input[i * 2 * n + n..(i + 1) * 2 * n].copy_from_slice(&dyk[i * n..(i + 1) * n]);
        }
    };
    // Terminal knot: values are already the terminal-operator output of
    // the forward sweep (they depend only on the flow states); fit them so
    // the policy predicts at every knot.
    {
        fill_input(&mut input, base.y.knot_slice(steps), dy.knot_slice(steps));
        let coef = fit_knot(
            BasisId::Affine,
            &input,
            2 * n,
            weights,
            dp.knot_slice(steps),
            n,
        )?;
        fit.set_p(steps, coef);
    }
    let mut drv = vec![0.0; count * n];
    {
        let s_end = grid.knot(steps);
        let coeffs = spec.dynamics.coeffs_at(s_end);
        let dy_avg = flow_avg(dy.knot_slice(steps), n, weights);
        let dv_avg = flow_avg(term_dv, d, weights);
        let dp_avg = flow_avg(dp.knot_slice(steps), n, weights);
        let dq_avg = flow_avg(dq.knot_slice(steps), qd, weights);
        let frame = FlowFrame {
            k: steps,
            s: s_end,
            coeffs: &coeffs,
            y: base.y.knot_slice(steps),
            v: term_v,
            p: base.p.knot_slice(steps),
            q: base.q.knot_slice(steps),
            mean: base.means[steps].as_slice(),
            weights,
            dy: dy.knot_slice(steps),
            dv: term_dv,
            dp: dp.knot_slice(steps),
            dq: dq.knot_slice(steps),
            dy_avg: &dy_avg,
            dv_avg: &dv_avg,
            dp_avg: &dp_avg,
            dq_avg: &dq_avg,
        };
        drv.par_chunks_mut(n)
            .enumerate()
            .try_for_each(|(i, slot)| -> Result<()> {
                let b = driver.backward_driver(&frame, i)?;
                slot.copy_from_slice(b.as_slice());
                Ok(())
            })?;
    }
    let target_dim = if sigma_free { n } else { n + qd };
    let mut targets = vec![0.0; count * target_dim];
    for k in (0..steps).rev() {
        {
            let dpk1 = dp.knot_slice(k + 1);
            targets
                .par_chunks_mut(target_dim)
                .enumerate()
                .for_each(|(i, row)| {
                    let pnext = &dpk1[i * n..(i + 1) * n];
                    let dr = &drv[i * n..(i + 1) * n];
                    for a in 0..n {
                        row[a] = pnext[a] + dr[a] * dt;
                    }
                    if !sigma_free {
                        let dw = bundle.increment(i, k);
                        for j in 0..noise {
                            for a in 0..n {
                                row[n + j * n + a] = pnext[a] * dw[j] / dt;
                            }
                        }
                    }
                });
        }
        let yk = base.y.knot_slice(k);
        fill_input(&mut input, yk, dy.knot_slice(k));
        let coef = fit_knot(BasisId::Affine, &input, 2 * n, weights, &targets, target_dim)?;
        let pcoef = coef.rows(0, n).into_owned();
        let qcoef = if sigma_free {
            DMatrix::zeros(qd, bsize)
        } else {
            coef.rows(n, qd).into_owned()
        };
        fit.set_p(k, pcoef);
        fit.set_q(k, qcoef);
        {
            let dpk = dp.knot_slice_mut(k);
            let dqk = dq.knot_slice_mut(k);
            dpk.par_chunks_mut(n)
                .zip(dqk.par_chunks_mut(qd))
                .enumerate()
                .for_each(|(i, (pp, qq))| {
                    let mut feat = vec![0.0; bsize];
                    let u = &input[i * 2 * n..(i + 1) * 2 * n];
                    fit.eval_p_into(k, u, &mut feat, pp);
                    if !sigma_free {
                        fit.eval_q_into(k, u, &mut feat, qq);
                    } else {
                        qq.fill(0.0);
                    }
                });
        }
        let s = grid.knot(k);
        let coeffs = spec.dynamics.coeffs_at(s);
        let dy_avg = flow_avg(dy.knot_slice(k), n, weights);
        let dp_avg = flow_avg(dp.knot_slice(k), n, weights);
        let dq_avg = flow_avg(dq.knot_slice(k), qd, weights);
        {
            let frame = FlowFrame {
                k,
                s,
                coeffs: &coeffs,
                y: yk,
                v: base.v_hat.knot_slice(k),
                p: base.p.knot_slice(k),
                q: base.q.knot_slice(k),
                mean: base.means[k].as_slice(),
                weights,
                dy: dy.knot_slice(k),
                dv: &[],
                dp: dp.knot_slice(k),
                dq: dq.knot_slice(k),
                dy_avg: &dy_avg,
                dv_avg: &[],
                dp_avg: &dp_avg,
                dq_avg: &dq_avg,
            };
            dv.knot_slice_mut(k)
                .par_chunks_mut(d)
                .enumerate()
                .try_for_each(|(i, slot)| -> Result<()> {
                    let var = driver.control_variation(&frame, i)?;
                    slot.copy_from_slice(var.as_slice());
                    Ok(())
                })?;
        }
        if k > 0 {
            let dv_avg = flow_avg(dv.knot_slice(k), d, weights);
            let frame = FlowFrame {
                k,
                s,
                coeffs: &coeffs,
                y: yk,
                v: base.v_hat.knot_slice(k),
                p: base.p.knot_slice(k),
                q: base.q.knot_slice(k),
                mean: base.means[k].as_slice(),
                weights,
                dy: dy.knot_slice(k),
                dv: dv.knot_slice(k),
                dp: dp.knot_slice(k),
                dq: dq.knot_slice(k),
                dy_avg: &dy_avg,
                dv_avg: &dv_avg,
                dp_avg: &dp_avg,
                dq_avg: &dq_avg,
            };
            drv.par_chunks_mut(n)
                .enumerate()
                .try_for_each(|(i, slot)| -> Result<()> {
                    let b = driver.backward_driver(&frame, i)?;
                    slot.copy_from_slice(b.as_slice());
                    Ok(())
                })?;
        }
    }
    Ok(fit)
}

/// Prediction change of a flow sweep against the previous flow policy on
/// the sweep's own inputs. Serial, like [`prediction_distance`].
fn flow_prediction_distance(
    old: &PolicyRepresentation,
    base: &FbsdeSolution,
    fields: &FlowFields,
) -> f64 {
    let n = fields.dp.dim();
    let qd = fields.dq.dim();
    let bsize = old.basis.feature_count(old.input_dim);
    let mut feat = vec![0.0; bsize];
    let mut pbuf = vec![0.0; n];
    let mut qbuf = vec![0.0; qd];
    let mut u = vec![0.0; 2 * n];
    let mut worst = 0.0f64;
    for k in 0..fields.dp.knots() {
        let yk = base.y.knot_slice(k);
        let mut acc = 0.0;
        for (i, &w) in base.weights.iter().enumerate() {
            u[..n].copy_from_slice(&yk[i * n..(i + 1) * n]);
            u[n..].copy_from_slice(fields.dy.at(k, i));
            old.eval_p_into(k, &u, &mut feat, &mut pbuf);
            for (a, &pa) in fields.dp.at(k, i).iter().enumerate() {
                let dev = pa - pbuf[a];
                acc += w * dev * dev;
            }
            old.eval_q_into(k, &u, &mut feat, &mut qbuf);
            for (a, &qa) in fields.dq.at(k, i).iter().enumerate() {
                let dev = qa - qbuf[a];
                acc += w * dev * dev;
            }
        }
        worst = worst.max(acc.sqrt());
    }
    worst
}

/// Solves an affine linear forward-backward system along `base` with the
/// same regression and damping machinery as the nonlinear solver. The
/// regression inputs concatenate base and flow states, which keeps the fit
/// exact for linear-quadratic coefficients, and the flow inherits the base
/// increments so pathwise comparisons against finite differences share
/// their noise.
pub fn solve_linear_fbsde(
    spec: &ProblemSpec,
    base: &FbsdeSolution,
    driver: &dyn AffineFlowDriver,
    bundle: &BrownianBundle,
    opts: &SolverOptions,
) -> Result<LinearFlowSolution> {
    opts.validate()?;
    let count = base.weights.len();
    let steps = base.grid.steps;
    let noise = spec.noise_dim();
    if bundle.particles() != count || bundle.steps() != steps || bundle.noise_dim() != noise {
        return Err(Error::dim(
            "solve_linear_fbsde bundle",
            format!("{count} particles x {steps} steps x {noise} noise dims"),
            format!(
                "{} particles x {} steps x {} noise dims",
                bundle.particles(),
                bundle.steps(),
                bundle.noise_dim()
            ),
        ));
    }
    let n = spec.state_dim();
    let qd = n * noise;
    let sigma_free = sigma_identically_zero(spec, &base.grid);
    let term_v = terminal_controls(spec, base, &opts.control)?;
    let mut policy = PolicyRepresentation::zeros(BasisId::Affine, 2 * n, n, qd, steps + 1);
    let mut deltas = Vec::new();
    // Structured directions often collapse the flow cross-section onto its
    // ensemble average, where the mean-feedback eigenvalue sits close to
    // the damped unit circle and plain Picard stalls. The update vectors
    // then align along that mode and decay geometrically, so the tail is
    // summed in closed form once the ratio estimate is clean.
    let mut before = Vec::new();
    let mut update = Vec::new();
    let mut update_prev = Vec::new();
    let mut cooldown = 0usize;
    for iter in 1..=opts.picard_max {
        let mut fields = flow_forward(spec, base, driver, bundle, &policy, &term_v, sigma_free)?;
        let fit = flow_backward(spec, base, driver, bundle, &mut fields, &term_v, sigma_free)?;
        let delta = flow_prediction_distance(&policy, base, &fields);
        deltas.push(delta);
        if delta <= opts.picard_tol {
            // Closing forward sweep under the converged policy, so the
            // stored flow tuple is generated by the stored coefficients.
            let fin = flow_forward(spec, base, driver, bundle, &fit, &term_v, sigma_free)?;
            return Ok(LinearFlowSolution {
                kind: driver.kind(),
                anchor: driver.anchor(),
                grid: base.grid,
                dy: fin.dy,
                dp: fin.dp,
                dq: fin.dq,
                dv: fin.dv,
                diagnostics: SolveDiagnostics {
                    iterations: iter,
                    deltas,
                    converged: true,
                    continuation: Vec::new(),
                },
            });
        }
        policy.flatten_into(&mut before);
        policy.blend_from(opts.damping, &fit);
        policy.flatten_into(&mut update);
        for (u, b) in update.iter_mut().zip(&before) {
            *u -= b;
        }
        let mut extrapolated = false;
        if cooldown == 0 && update_prev.len() == update.len() {
            let denom: f64 = update_prev.iter().map(|v| v * v).sum();
            if denom > 0.0 {
                let num: f64 = update.iter().zip(&update_prev).map(|(a, b)| a * b).sum();
                let rho = num / denom;
                let mut resid = 0.0;
                let mut norm = 0.0;
                for (a, b) in update.iter().zip(&update_prev) {
                    let r = a - rho * b;
                    resid += r * r;
                    norm += a * a;
                }
                if (0.5..=0.995).contains(&rho.abs()) && resid <= 0.0625 * norm {
                    policy.add_scaled_flat(rho / (1.0 - rho), &update);
                    // One plain step re-seeds the direction estimate.
                    cooldown = 1;
                    update_prev.clear();
                    extrapolated = true;
                }
            }
        }
        if !extrapolated {
            cooldown = cooldown.saturating_sub(1);
            std::mem::swap(&mut update_prev, &mut update);
        }
    }
    let last_delta = *deltas.last().expect("picard_max >= 1");
    Err(Error::PicardDiverged {
        iterations: opts.picard_max,
        last_delta,
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{riccati_oracle, LqParams, ORACLE_REFINE};
    use crate::model::{CostModel, LinearDynamics, LqCost};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn scalar_dynamics(coeff: [f64; 8]) -> LinearDynamics {
        let [f0, f1, f2, f3, s0, s1, s2, s3] = coeff;
        let mut c = DynCoeffs::zeros(1, 1);
        c.f0[0] = f0;
        c.f1[(0, 0)] = f1;
        c.f2[(0, 0)] = f2;
        c.f3[(0, 0)] = f3;
        c.sig0[0][0] = s0;
        c.sig1[0][(0, 0)] = s1;
        c.sig2[0][(0, 0)] = s2;
        c.sig3[0][(0, 0)] = s3;
        LinearDynamics::constant(c, 50.0).unwrap()
    }

    fn gaussian_ensemble(count: usize, mean: f64, std: f64, seed: u64) -> ParticleEnsemble {
        ParticleEnsemble::gaussian(
            count,
            &DVector::from_element(1, mean),
            &DVector::from_element(1, std),
            seed,
        )
        .unwrap()
    }

    /// Control-only running cost with a linear terminal cost; every
    /// derivative exercises the finite-difference defaults.
    struct LinearTerminalCost {
        slope: f64,
    }

    impl CostModel for LinearTerminalCost {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn lambda(&self) -> f64 {
            0.5
        }
        fn interaction(&self) -> InteractionKind {
            InteractionKind::MeasureFree
        }
        fn g(&self, _x: &[f64], _m: Pop, v: &[f64], _s: f64) -> f64 {
            0.5 * v[0] * v[0]
        }
        fn g_term(&self, x: &[f64], _m: Pop) -> f64 {
            self.slope * x[0]
        }
    }

    #[test]
    fn fit_absorbs_zero_spread_columns_into_intercept() {
        // A constant input column must not leak huge cancelling
        // coefficients out of the near-singular normal equations.
        let count = 48;
        let weights = vec![1.0 / count as f64; count];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut inputs = vec![0.0; count * 2];
        let targets = vec![0.8; count];
        for i in 0..count {
            inputs[2 * i] = rng.gen::<f64>() * 2.0 - 1.0;
            inputs[2 * i + 1] = 0.8;
        }
        let coef = fit_knot(BasisId::Affine, &inputs, 2, &weights, &targets, 1).unwrap();
        assert_eq!(coef[(0, 2)], 0.0);
        let pred = coef[(0, 0)] + coef[(0, 1)] * inputs[0] + coef[(0, 2)] * 0.8;
        assert_relative_eq!(pred, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn features_standardization_roundtrip() {
        for basis in [BasisId::Affine, BasisId::Quadratic] {
            let mu = [0.7, -1.3, 0.2];
            let scale = [2.0, 0.5, 1.7];
            let u = [1.9, -0.4, 0.8];
            let b = basis.feature_count(3);
            let mut raw = vec![0.0; b];
            fill_features(basis, &u, &mut raw);
            let z: Vec<f64> = (0..3).map(|a| (u[a] - mu[a]) / scale[a]).collect();
            let mut std_feat = vec![0.0; b];
            fill_features(basis, &z, &mut std_feat);
            let t = standardized_to_raw(basis, &mu, &scale);
            let recon = &t * DVector::from_column_slice(&raw);
            for p in 0..b {
                assert_relative_eq!(recon[p], std_feat[p], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fit_recovers_quadratic_function_exactly() {
        let count = 40;
        let weights = vec![1.0 / count as f64; count];
        let mut inputs = vec![0.0; count * 2];
        let mut targets = vec![0.0; count];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..count {
            let x = rng.gen::<f64>() * 4.0 - 2.0;
            let y = rng.gen::<f64>() * 4.0 - 2.0;
            inputs[2 * i] = x;
            inputs[2 * i + 1] = y;
            targets[i] = 1.5 - 0.3 * x + 0.8 * y + 0.25 * x * x - 1.1 * x * y + 0.6 * y * y;
        }
        let coef = fit_knot(BasisId::Quadratic, &inputs, 2, &weights, &targets, 1).unwrap();
        let b = BasisId::Quadratic.feature_count(2);
        let mut feat = vec![0.0; b];
        let mut out = vec![0.0; 1];
        for i in 0..count {
            fill_features(BasisId::Quadratic, &inputs[2 * i..2 * i + 2], &mut feat);
            mat_vec_into(&coef, &feat, &mut out);
            assert_relative_eq!(out[0], targets[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn forward_is_constant_without_dynamics() {
        let dynamics = scalar_dynamics([0.0; 8]);
        let cost = Arc::new(LqCost::scalar(0.0, 0.0, 1.0, 0.0, 0.0));
        let spec = ProblemSpec::new(dynamics, cost, 1.0).unwrap();
        let ensemble = gaussian_ensemble(16, 0.4, 1.0, 5);
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let bundle = BrownianBundle::sample(16, &grid, 1, 5, StreamPurpose::Brownian);
        let policy = PolicyRepresentation::zeros(BasisId::Affine, 1, 1, 1, 9);
        let fwd = forward_pass(&spec, &ensemble, &grid, &bundle, &policy, &ControlOptions::default()).unwrap();
        for k in 0..=8 {
            assert_eq!(fwd.y.knot_slice(k), ensemble.atoms_flat());
        }
        assert!(fwd.v.flat().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn forward_integrates_constant_drift_exactly() {
        let dynamics = scalar_dynamics([0.7, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let cost = Arc::new(LqCost::scalar(0.0, 0.0, 1.0, 0.0, 0.0));
        let spec = ProblemSpec::new(dynamics, cost, 2.0).unwrap();
        let ensemble = gaussian_ensemble(8, -0.2, 0.5, 9);
        let grid = TimeGrid::new(0.0, 2.0, 16).unwrap();
        let bundle = BrownianBundle::zeros(8, 16, 1);
        let policy = PolicyRepresentation::zeros(BasisId::Affine, 1, 1, 1, 17);
        let fwd = forward_pass(&spec, &ensemble, &grid, &bundle, &policy, &ControlOptions::default()).unwrap();
        for i in 0..8 {
            let expected = ensemble.atom(i)[0] + 0.7 * 2.0;
            assert_relative_eq!(fwd.y.at(16, i)[0], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_mean_tracks_linear_ode() {
        // dY = Y ds with v pinned at zero: the Euler mean is (1 + dt)^K and
        // the gap to e^T shrinks like dt.
        let dynamics = scalar_dynamics([0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let cost = Arc::new(LqCost::scalar(0.0, 0.0, 1.0, 0.0, 0.0));
        let spec = ProblemSpec::new(dynamics, cost, 1.0).unwrap();
        let ensemble = gaussian_ensemble(4, 1.0, 0.0, 2);
        let run = |steps: usize| {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let bundle = BrownianBundle::zeros(4, steps, 1);
            let policy = PolicyRepresentation::zeros(BasisId::Affine, 1, 1, 1, steps + 1);
            let fwd =
                forward_pass(&spec, &ensemble, &grid, &bundle, &policy, &ControlOptions::default())
                    .unwrap();
            (fwd.means[steps][0] - std::f64::consts::E).abs()
        };
        let coarse = run(100);
        let fine = run(200);
        assert!(coarse < 0.02, "coarse error {coarse}");
        let ratio = coarse / fine;
        assert!((1.5..2.5).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn constant_terminal_gradient_propagates_as_martingale() {
        let dynamics = scalar_dynamics([0.0; 8]);
        let cost = Arc::new(LinearTerminalCost { slope: 2.0 });
        let spec = ProblemSpec::new(dynamics, cost, 1.0).unwrap();
        let ensemble = gaussian_ensemble(32, 0.3, 0.8, 7);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let bundle = BrownianBundle::sample(32, &grid, 1, 7, StreamPurpose::Brownian);
        let opts = SolverOptions {
            damping: 1.0,
            ..SolverOptions::default()
        };
        let sol = picard_solve(&spec, &ensemble, &grid, &bundle, &opts).unwrap();
        assert!(sol.diagnostics.iterations <= 2);
        for k in 0..=10 {
            for i in 0..32 {
                assert_relative_eq!(sol.p.at(k, i)[0], 2.0, epsilon = 1e-6);
            }
        }
        assert!(sol.q.flat().iter().all(|&z| z == 0.0));
        assert!(sol.v_hat.flat().iter().all(|&z| z.abs() < 1e-6));
    }

    #[test]
    fn quadratic_terminal_cost_reads_back_the_state() {
        // No dynamics, terminal cost x^2/2: the costate equals the frozen
        // initial state at every knot and the affine fit is exact.
        let dynamics = scalar_dynamics([0.0; 8]);
        let cost = Arc::new(LqCost::scalar(0.0, 0.0, 1.0, 1.0, 0.0));
        let spec = ProblemSpec::new(dynamics, cost, 1.0).unwrap();
        let ensemble = gaussian_ensemble(24, -0.1, 1.1, 13);
        let grid = TimeGrid::new(0.0, 1.0, 6).unwrap();
        let bundle = BrownianBundle::zeros(24, 6, 1);
        let opts = SolverOptions {
            damping: 1.0,
            ..SolverOptions::default()
        };
        let sol = picard_solve(&spec, &ensemble, &grid, &bundle, &opts).unwrap();
        assert!(sol.diagnostics.iterations <= 2);
        for k in 0..=6 {
            for i in 0..24 {
                assert_relative_eq!(sol.p.at(k, i)[0], ensemble.atom(i)[0], epsilon = 1e-10);
            }
        }
    }

    fn lq_test_params() -> LqParams {
        LqParams::scalar(0.3, 0.2, 1.0, 0.4, 1.0, 0.5, 1.0, 0.8, 0.4, 1.0)
    }

    #[test]
    fn lq_costates_match_riccati_oracle() {
        let params = lq_test_params();
        let spec = params.spec().unwrap();
        let steps = 25;
        let count = 1024;
        let grid = TimeGrid::new(0.0, params.horizon, steps).unwrap();
        let ensemble = gaussian_ensemble(count, 0.7, 0.9, 21);
        let bundle = BrownianBundle::sample(count, &grid, 1, 21, StreamPurpose::Brownian);
        let sol = continuation_solve(&spec, &ensemble, &grid, &bundle, &SolverOptions::default())
            .unwrap();
        let oracle = riccati_oracle(&params, steps * ORACLE_REFINE).unwrap();
        let mut err = 0.0;
        let mut norm = 0.0;
        for k in [0usize, steps / 2] {
            let t = grid.knot(k);
            let mean = &sol.means[k];
            for i in 0..count {
                let x = DVector::from_column_slice(sol.y.at(k, i));
                let exact = oracle.costate(&x, mean, t)[0];
                let got = sol.p.at(k, i)[0];
                err += sol.weights[i] * (got - exact) * (got - exact);
                norm += sol.weights[i] * exact * exact;
            }
        }
        let rel = (err / norm).sqrt();
        assert!(rel < 0.05, "relative costate error {rel}");
    }

    #[test]
    fn noiseless_dynamics_force_zero_martingale_field() {
        let params = lq_test_params();
        let mut no_noise = params.clone();
        no_noise.c = DMatrix::zeros(1, 1);
        let spec = no_noise.spec().unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 12).unwrap();
        let ensemble = gaussian_ensemble(64, 0.5, 1.0, 3);
        let bundle = BrownianBundle::sample(64, &grid, 1, 3, StreamPurpose::Brownian);
        let sol = picard_solve(&spec, &ensemble, &grid, &bundle, &SolverOptions::default()).unwrap();
        assert!(sol.q.flat().iter().all(|&z| z == 0.0));
        for k in 0..=12 {
            assert!(sol.policy.q_coefficients(k).iter().all(|&z| z == 0.0));
        }
    }

    /// Wrapper that hides the mean-coupled structure so the solver takes
    /// the pairwise path; results must agree with the structured one.
    struct OpaqueCoupling(LqCost);

    impl CostModel for OpaqueCoupling {
        fn state_dim(&self) -> usize {
            self.0.state_dim()
        }
        fn control_dim(&self) -> usize {
            self.0.control_dim()
        }
        fn lambda(&self) -> f64 {
            self.0.lambda()
        }
        fn interaction(&self) -> InteractionKind {
            InteractionKind::General
        }
        fn g(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> f64 {
            self.0.g(x, m, v, s)
        }
        fn g_term(&self, x: &[f64], m: Pop) -> f64 {
            self.0.g_term(x, m)
        }
        fn d_x(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> DVector<f64> {
            self.0.d_x(x, m, v, s)
        }
        fn d_v(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> DVector<f64> {
            self.0.d_v(x, m, v, s)
        }
        fn d_x_term(&self, x: &[f64], m: Pop) -> DVector<f64> {
            self.0.d_x_term(x, m)
        }
        fn d_m(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> f64 {
            self.0.d_m(x, m, v, s, p)
        }
        fn d_m_term(&self, x: &[f64], m: Pop, p: &[f64]) -> f64 {
            self.0.d_m_term(x, m, p)
        }
        fn d_mp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> DVector<f64> {
            self.0.d_mp(x, m, v, s, p)
        }
        fn d_mp_term(&self, x: &[f64], m: Pop, p: &[f64]) -> DVector<f64> {
            self.0.d_mp_term(x, m, p)
        }
        fn d_xx(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> DMatrix<f64> {
            self.0.d_xx(x, m, v, s)
        }
        fn d_xv(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> DMatrix<f64> {
            self.0.d_xv(x, m, v, s)
        }
        fn d_vv(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> DMatrix<f64> {
            self.0.d_vv(x, m, v, s)
        }
    }

    #[test]
    fn pairwise_coupling_path_matches_structured_path() {
        let params = lq_test_params();
        let structured = params.spec().unwrap();
        let mut opaque = params.spec().unwrap();
        opaque.cost = Arc::new(OpaqueCoupling(LqCost::scalar(1.0, 0.5, 1.0, 0.8, 0.4)));
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let ensemble = gaussian_ensemble(48, 0.6, 0.8, 11);
        let bundle = BrownianBundle::sample(48, &grid, 1, 11, StreamPurpose::Brownian);
        let opts = SolverOptions::default();
        let a = picard_solve(&structured, &ensemble, &grid, &bundle, &opts).unwrap();
        let b = picard_solve(&opaque, &ensemble, &grid, &bundle, &opts).unwrap();
        for (pa, pb) in a.p.flat().iter().zip(b.p.flat()) {
            assert_relative_eq!(pa, pb, epsilon = 1e-9, max_relative = 1e-9);
        }
        for (va, vb) in a.v_hat.flat().iter().zip(b.v_hat.flat()) {
            assert_relative_eq!(va, vb, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn residuals_vanish_on_converged_trivial_problem() {
        let dynamics = scalar_dynamics([0.0; 8]);
        let cost = Arc::new(LqCost::scalar(0.0, 0.0, 1.0, 1.0, 0.0));
        let spec = ProblemSpec::new(dynamics, cost, 1.0).unwrap();
        let ensemble = gaussian_ensemble(24, 0.2, 1.0, 17);
        let grid = TimeGrid::new(0.0, 1.0, 6).unwrap();
        let bundle = BrownianBundle::zeros(24, 6, 1);
        let sol = picard_solve(&spec, &ensemble, &grid, &bundle, &SolverOptions::default()).unwrap();
        let report = residuals(&spec, &sol, &bundle).unwrap();
        assert_eq!(report.forward_sup, 0.0);
        assert!(report.backward_sup < 1e-9, "backward {}", report.backward_sup);
        assert!(report.martingale_sup < 1e-9);
        assert!(report.foc_max < 1e-8);
    }

    #[test]
    fn lq_residuals_scale_like_the_scheme() {
        let params = lq_test_params();
        let spec = params.spec().unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let ensemble = gaussian_ensemble(256, 0.7, 0.9, 29);
        let bundle = BrownianBundle::sample(256, &grid, 1, 29, StreamPurpose::Brownian);
        let sol = picard_solve(&spec, &ensemble, &grid, &bundle, &SolverOptions::default()).unwrap();
        let report = residuals(&spec, &sol, &bundle).unwrap();
        assert_eq!(report.forward_sup, 0.0);
        // One-step residuals carry the unpredictable martingale increment,
        // so they sit at the Q sqrt(dt) scale, far below O(1).
        assert!(report.backward_sup < 0.5, "backward {}", report.backward_sup);
        // The ensemble average removes the martingale part up to sampling
        // error.
        assert!(
            report.martingale_sup < 5.0 * report.backward_sup / (256.0f64).sqrt(),
            "martingale {} vs backward {}",
            report.martingale_sup,
            report.backward_sup
        );
        assert!(report.foc_max < 1e-7, "foc {}", report.foc_max);
    }

    #[test]
    fn continuation_with_one_stage_matches_direct_solve() {
        let params = lq_test_params();
        let spec = params.spec().unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let ensemble = gaussian_ensemble(64, 0.5, 0.8, 31);
        let bundle = BrownianBundle::sample(64, &grid, 1, 31, StreamPurpose::Brownian);
        let opts = SolverOptions::default();
        let direct = picard_solve(&spec, &ensemble, &grid, &bundle, &opts).unwrap();
        let homotopy = continuation_solve(&spec, &ensemble, &grid, &bundle, &opts).unwrap();
        assert_eq!(homotopy.diagnostics.continuation, vec![1.0]);
        assert_eq!(direct.y.flat(), homotopy.y.flat());
        assert_eq!(direct.p.flat(), homotopy.p.flat());
        assert_eq!(direct.q.flat(), homotopy.q.flat());
        assert_eq!(direct.v_hat.flat(), homotopy.v_hat.flat());
    }

    #[test]
    fn solve_is_bitwise_reproducible_across_worker_counts() {
        let params = lq_test_params();
        let spec = params.spec().unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
                let ensemble = gaussian_ensemble(96, 0.5, 0.9, 37);
                let bundle = BrownianBundle::sample(96, &grid, 1, 37, StreamPurpose::Brownian);
                picard_solve(&spec, &ensemble, &grid, &bundle, &SolverOptions::default()).unwrap()
            })
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.y.flat(), four.y.flat());
        assert_eq!(one.p.flat(), four.p.flat());
        assert_eq!(one.q.flat(), four.q.flat());
        assert_eq!(one.v_hat.flat(), four.v_hat.flat());
        assert_eq!(one.diagnostics.iterations, four.diagnostics.iterations);
    }

    #[test]
    fn monotonicity_certificate_passes_on_lq_benchmark() {
        let params = lq_test_params();
        let spec = params.spec().unwrap();
        let report = monotonicity_certificate(&spec, 300, 8, 11).unwrap();
        assert_eq!(report.violations, 0, "worst margin {}", report.worst_margin);
        assert!(report.lambda > 0.3, "lambda {}", report.lambda);
        assert!(report.worst_margin >= -1e-9);
    }

    /// Flow driver with zero dynamics, a constant initial condition and an
    /// identity terminal operator: the flow state is frozen and the flow
    /// costate must equal it at every knot.
    struct FrozenIdentityDriver {
        n: usize,
        init: f64,
    }

    impl AffineFlowDriver for FrozenIdentityDriver {
        fn kind(&self) -> FlowKind {
            FlowKind::Gateaux
        }
        fn initial(&self, _i: usize) -> DVector<f64> {
            DVector::from_element(self.n, self.init)
        }
        fn control_variation(&self, _frame: &FlowFrame<'_>, _i: usize) -> Result<DVector<f64>> {
            Ok(DVector::zeros(1))
        }
        fn forward_drift(&self, _frame: &FlowFrame<'_>, _i: usize) -> Result<DVector<f64>> {
            Ok(DVector::zeros(self.n))
        }
        fn forward_diffusion(
            &self,
            _frame: &FlowFrame<'_>,
            _i: usize,
            _j: usize,
        ) -> Result<DVector<f64>> {
            Ok(DVector::zeros(self.n))
        }
        fn terminal(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
            Ok(DVector::from_column_slice(
                &frame.dy[i * self.n..(i + 1) * self.n],
            ))
        }
        fn backward_driver(&self, _frame: &FlowFrame<'_>, _i: usize) -> Result<DVector<f64>> {
            Ok(DVector::zeros(self.n))
        }
    }

    #[test]
    fn frozen_flow_propagates_terminal_identity() {
        let params = lq_test_params();
        let spec = params.spec().unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let ensemble = gaussian_ensemble(48, 0.5, 0.8, 41);
        let bundle = BrownianBundle::sample(48, &grid, 1, 41, StreamPurpose::Brownian);
        let base = picard_solve(&spec, &ensemble, &grid, &bundle, &SolverOptions::default()).unwrap();
        let driver = FrozenIdentityDriver { n: 1, init: 0.8 };
        let opts = SolverOptions {
            damping: 1.0,
            ..SolverOptions::default()
        };
        let flow = solve_linear_fbsde(&spec, &base, &driver, &bundle, &opts).unwrap();
        // The constant flow direction is collinear with the intercept, so
        // this also exercises the rank-deficient fallback.
        for k in 0..=8 {
            for i in 0..48 {
                assert_relative_eq!(flow.dy.at(k, i)[0], 0.8, epsilon = 1e-12);
                assert_relative_eq!(flow.dp.at(k, i)[0], 0.8, epsilon = 1e-9);
            }
        }
        assert!(flow.dv.flat().iter().all(|&z| z == 0.0));
    }
}
