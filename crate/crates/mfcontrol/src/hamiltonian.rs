//! Pointwise Hamiltonian system: Lagrangian, control minimization, and the
//! derivative blocks consumed as forward and backward drivers.
//!
//! Everything here is a pure function of one (state, measure, costate)
//! tuple, safe to evaluate in parallel across particles. Ensemble
//! averaging, regression and time stepping live in `fbsde`; this module
//! answers the local questions: what is the optimal control at this point,
//! and what are the drivers there.
//!
//! Because the drift and diffusion are affine in the control, the control
//! Hessian of the Lagrangian is exactly the control Hessian of the running
//! cost, which the convexity certificate bounds below. The Newton solve in
//! [`minimize_control`] leans on that.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::measure::Pop;
use crate::model::ProblemSpec;

/// Costate attached to one particle: the vector `p` paired with the matrix
/// `q` whose column `j` multiplies noise direction `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateTuple {
    pub p: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl CostateTuple {
    pub fn zeros(state_dim: usize) -> Self {
        CostateTuple {
            p: DVector::zeros(state_dim),
            q: DMatrix::zeros(state_dim, state_dim),
        }
    }

    pub fn check_dims(&self, state_dim: usize) -> Result<()> {
        if self.p.len() != state_dim || self.q.nrows() != state_dim || self.q.ncols() != state_dim
        {
            return Err(Error::dim(
                "CostateTuple",
                format!("p in R^{state_dim}, q {state_dim}x{state_dim}"),
                format!(
                    "p in R^{}, q {}x{}",
                    self.p.len(),
                    self.q.nrows(),
                    self.q.ncols()
                ),
            ));
        }
        Ok(())
    }
}

/// Knobs for the pointwise Newton solve of the first-order condition.
#[derive(Debug, Clone, Copy)]
pub struct ControlOptions {
    /// Absolute tolerance on the norm of the control gradient at the
    /// accepted control.
    pub foc_tol: f64,
    /// Iteration cap before the solve reports divergence.
    pub max_iter: usize,
}

impl Default for ControlOptions {
    fn default() -> Self {
        // 1e-10 sits far below the discretization error of every caller,
        // so control accuracy never limits a solve.
        ControlOptions {
            foc_tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// Accepted control together with the solve diagnostics callers record.
#[derive(Debug, Clone)]
pub struct ControlSolution {
    pub v_hat: DVector<f64>,
    pub iterations: usize,
    /// Norm of the control gradient at `v_hat`; at most `foc_tol`.
    pub foc_residual: f64,
}

/// Hamiltonian value and every derivative block the drivers need.
///
/// The derivative fields use the envelope identity: since the control
/// gradient vanishes at `v_hat`, differentiating through the minimizer
/// contributes nothing, and each block is the partial derivative of the
/// Lagrangian at the frozen optimal control.
#[derive(Debug, Clone)]
pub struct HamiltonianEval {
    pub v_hat: DVector<f64>,
    pub h: f64,
    /// Drift at the optimal control; forward driver.
    pub d_p_h: DVector<f64>,
    /// Diffusion at the optimal control, column `j` for noise `j`.
    pub d_q_h: DMatrix<f64>,
    /// State gradient at the frozen optimal control; backward driver part.
    pub d_x_h: DVector<f64>,
    pub newton_iterations: usize,
    pub foc_residual: f64,
}

/// Lagrangian `p . f + sum_j q^j . sigma^j + g` at one tuple.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian(
    spec: &ProblemSpec,
    x: &DVector<f64>,
    m: Pop<'_>,
    v: &DVector<f64>,
    s: f64,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> Result<f64> {
    let mbar = DVector::from_column_slice(m.mean());
    let drift = spec.eval_drift(x, &mbar, v, s)?;
    let mut total = p.dot(&drift);
    for j in 0..spec.noise_dim() {
        let col = spec.eval_diffusion_col(j, x, &mbar, v, s)?;
        total += q.column(j).dot(&col);
    }
    total += spec.cost.g(x.as_slice(), m, v.as_slice(), s);
    Ok(total)
}

/// Minimizes the Lagrangian over the control slot, starting from `v = 0`.
#[allow(clippy::too_many_arguments)]
pub fn minimize_control(
    spec: &ProblemSpec,
    x: &DVector<f64>,
    m: Pop<'_>,
    s: f64,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
    opts: &ControlOptions,
) -> Result<ControlSolution> {
    let v0 = DVector::zeros(spec.control_dim());
    minimize_control_from(spec, x, m, s, p, q, &v0, opts)
}

/// Minimizes the Lagrangian over the control slot from a caller-supplied
/// starting point (warm starts inside sweep loops).
///
/// Damped Newton on the control gradient
/// `D_v L = f3' p + sum_j sig3[j]' q^j + D_v g`, whose Jacobian is
/// `D_v^2 g`. Strong convexity of `g` in `v` makes the gradient strongly
/// monotone, so the backtracked iteration converges from any start.
#[allow(clippy::too_many_arguments)]
pub fn minimize_control_from(
    spec: &ProblemSpec,
    x: &DVector<f64>,
    m: Pop<'_>,
    s: f64,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
    v0: &DVector<f64>,
    opts: &ControlOptions,
) -> Result<ControlSolution> {
    let d = spec.control_dim();
    if v0.len() != d {
        return Err(Error::dim(
            "minimize_control_from",
            format!("{d}"),
            format!("{}", v0.len()),
        ));
    }
    let coeffs = spec.dynamics.coeffs_at(s);
    // Constant part of the gradient: the drift and diffusion are affine in
    // v, so their contribution does not move during the iteration.
    let mut grad_const = coeffs.f3.transpose() * p;
    for (j, sig3) in coeffs.sig3.iter().enumerate() {
        grad_const += sig3.transpose() * q.column(j);
    }
    let xs = x.as_slice();
    let gradient = |v: &DVector<f64>| -> DVector<f64> {
        &grad_const + spec.cost.d_v(xs, m, v.as_slice(), s)
    };

    let mut v = v0.clone();
    let mut g = gradient(&v);
    let mut residual = g.norm();
    for iteration in 0..opts.max_iter {
        if residual <= opts.foc_tol {
            return Ok(ControlSolution {
                v_hat: v,
                iterations: iteration,
                foc_residual: residual,
            });
        }
        let hess = spec.cost.d_vv(xs, m, v.as_slice(), s);
        let chol = hess.clone().cholesky().ok_or_else(|| Error::NotConvex {
            detail: format!(
                "control Hessian not positive definite at s = {s} (norm {:.3e})",
                hess.norm()
            ),
        })?;
        let step = chol.solve(&(-&g));
        // Backtrack on the gradient norm. A full step can overshoot when
        // the cost has super-quadratic growth in v; monotonicity of the
        // gradient guarantees some fraction of the Newton direction
        // decreases the norm.
        let mut t = 1.0;
        loop {
            let candidate = &v + t * &step;
            let g_new = gradient(&candidate);
            let r_new = g_new.norm();
            if r_new <= (1.0 - 0.25 * t) * residual || t <= 1.0 / 1024.0 {
                v = candidate;
                g = g_new;
                residual = r_new;
                break;
            }
            t *= 0.5;
        }
    }
    if residual <= opts.foc_tol {
        return Ok(ControlSolution {
            v_hat: v,
            iterations: opts.max_iter,
            foc_residual: residual,
        });
    }
    Err(Error::NewtonDiverged {
        residual,
        iterations: opts.max_iter,
    })
}

/// Evaluates the Hamiltonian and its driver blocks at one tuple.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    spec: &ProblemSpec,
    x: &DVector<f64>,
    m: Pop<'_>,
    s: f64,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
    opts: &ControlOptions,
) -> Result<HamiltonianEval> {
    let n = spec.state_dim();
    let control = minimize_control(spec, x, m, s, p, q, opts)?;
    let v_hat = control.v_hat;
    let mbar = DVector::from_column_slice(m.mean());
    let d_p_h = spec.eval_drift(x, &mbar, &v_hat, s)?;
    let mut d_q_h = DMatrix::zeros(n, n);
    let mut h = p.dot(&d_p_h) + spec.cost.g(x.as_slice(), m, v_hat.as_slice(), s);
    for j in 0..n {
        let col = spec.eval_diffusion_col(j, x, &mbar, &v_hat, s)?;
        h += q.column(j).dot(&col);
        d_q_h.set_column(j, &col);
    }
    let coeffs = spec.dynamics.coeffs_at(s);
    let mut d_x_h = coeffs.f1.transpose() * p;
    for (j, sig1) in coeffs.sig1.iter().enumerate() {
        d_x_h += sig1.transpose() * q.column(j);
    }
    d_x_h += spec.cost.d_x(x.as_slice(), m, v_hat.as_slice(), s);
    Ok(HamiltonianEval {
        v_hat,
        h,
        d_p_h,
        d_q_h,
        d_x_h,
        newton_iterations: control.iterations,
        foc_residual: control.foc_residual,
    })
}

/// Integrand of the averaged measure term in the backward driver: the
/// donor particle's contribution to the costate drift of a particle
/// sitting at `x_eval`,
/// `f2' p + sum_j sig2[j]' q^j + D_p (dg/dnu)(donor, m, donor_v, s)(x_eval)`.
/// The caller averages this over the donor ensemble.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_measure_term(
    spec: &ProblemSpec,
    x_eval: &DVector<f64>,
    donor_state: &DVector<f64>,
    m: Pop<'_>,
    donor_v: &DVector<f64>,
    donor_p: &DVector<f64>,
    donor_q: &DMatrix<f64>,
    s: f64,
) -> Result<DVector<f64>> {
    let coeffs = spec.dynamics.coeffs_at(s);
    let mut out = coeffs.f2.transpose() * donor_p;
    for (j, sig2) in coeffs.sig2.iter().enumerate() {
        out += sig2.transpose() * donor_q.column(j);
    }
    out += spec.cost.d_mp(
        donor_state.as_slice(),
        m,
        donor_v.as_slice(),
        s,
        x_eval.as_slice(),
    );
    Ok(out)
}

/// Measure derivative of the Hamiltonian at a donor tuple, evaluated at
/// the probe point `x_eval`:
///
/// ```text
/// x_eval' f2' p + sum_j q^j . (sig2[j] x_eval) + dg/dnu(donor, m, v_hat, s)(x_eval)
/// ```
///
/// The diffusion summand is the trace pairing of the mean sensitivity of
/// the noise with the second-order costate, written through the `q`
/// columns. Requires a control-free diffusion; the donor's optimal control
/// is recomputed internally from its costates.
///
/// The cost summand carries whatever representative the cost's measure
/// derivative uses; consumers combine evaluations at several probes so the
/// additive constant cancels.
#[allow(clippy::too_many_arguments)]
pub fn dh_dnu(
    spec: &ProblemSpec,
    donor_state: &DVector<f64>,
    s: f64,
    donor_p: &DVector<f64>,
    donor_q: &DMatrix<f64>,
    x_eval: &DVector<f64>,
    m: Pop<'_>,
    opts: &ControlOptions,
) -> Result<f64> {
    let coeffs = spec.dynamics.coeffs_at(s);
    let sig3_norm = coeffs.sigma_control_norm();
    if sig3_norm > 0.0 {
        return Err(Error::Unsupported {
            detail: format!(
                "measure derivative of the Hamiltonian needs a control-free \
                 diffusion; |sig3| = {sig3_norm:.3e} at s = {s}"
            ),
        });
    }
    let control = minimize_control(spec, donor_state, m, s, donor_p, donor_q, opts)?;
    let mut total = x_eval.dot(&(coeffs.f2.transpose() * donor_p));
    for (j, sig2) in coeffs.sig2.iter().enumerate() {
        total += donor_q.column(j).dot(&(sig2 * x_eval));
    }
    total += spec.cost.d_m(
        donor_state.as_slice(),
        m,
        control.v_hat.as_slice(),
        s,
        x_eval.as_slice(),
    );
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::ParticleEnsemble;
    use crate::model::{CostModel, DynCoeffs, LinearDynamics, LqCost, QuadQuarticCost};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn scalar_coeffs(f1: f64, f2: f64, f3: f64, s0: f64, s1: f64, s2: f64, s3: f64) -> DynCoeffs {
        let mut c = DynCoeffs::zeros(1, 1);
        c.f1[(0, 0)] = f1;
        c.f2[(0, 0)] = f2;
        c.f3[(0, 0)] = f3;
        c.sig0[0][0] = s0;
        c.sig1[0][(0, 0)] = s1;
        c.sig2[0][(0, 0)] = s2;
        c.sig3[0][(0, 0)] = s3;
        c
    }

    fn scalar_spec(coeffs: DynCoeffs, cost: Arc<dyn crate::model::CostModel>) -> ProblemSpec {
        let dynamics = LinearDynamics::constant(coeffs, 10.0).unwrap();
        ProblemSpec::new(dynamics, cost, 1.0).unwrap()
    }

    fn small_ensemble(values: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::from_flat(values.to_vec(), 1, 7).unwrap()
    }

    #[allow(clippy::too_many_arguments)]
    fn quartic(
        q: f64,
        q4: f64,
        kappa: f64,
        r: f64,
        r4: f64,
        q_t: f64,
        q4_t: f64,
        kappa_t: f64,
    ) -> Arc<QuadQuarticCost> {
        Arc::new(QuadQuarticCost {
            state_dim: 1,
            control_dim: 1,
            q,
            q4,
            kappa,
            r,
            r4,
            q_t,
            q4_t,
            kappa_t,
        })
    }

    fn lq_scalar(q: f64, q_bar: f64, r: f64) -> Arc<LqCost> {
        Arc::new(
            LqCost::new(
                DMatrix::from_element(1, 1, q),
                DMatrix::from_element(1, 1, q_bar),
                DMatrix::from_element(1, 1, r),
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 0.0),
            )
            .unwrap(),
        )
    }

    #[test]
    fn lagrangian_reduces_to_cost_without_costates() {
        let spec = scalar_spec(
            scalar_coeffs(0.2, 0.1, 1.0, 0.3, 0.0, 0.0, 0.0),
            lq_scalar(0.7, 0.2, 1.0),
        );
        let ensemble = small_ensemble(&[0.4, -0.2, 1.1]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let x = DVector::from_element(1, 0.5);
        let v = DVector::from_element(1, -0.3);
        let p = DVector::zeros(1);
        let q = DMatrix::zeros(1, 1);
        let l = lagrangian(&spec, &x, m, &v, 0.25, &p, &q).unwrap();
        let g = spec.cost.g(x.as_slice(), m, v.as_slice(), 0.25);
        assert_relative_eq!(l, g, max_relative = 1e-14);
    }

    #[test]
    fn lagrangian_scalar_formula() {
        // Drift b v with b = 1, no diffusion, cost r v^2 / 2 with r = 1:
        // L = p b v + r v^2 / 2 at (p, v) = (2, 1) is 2.5.
        let spec = scalar_spec(
            scalar_coeffs(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0),
            lq_scalar(0.0, 0.0, 1.0),
        );
        let ensemble = small_ensemble(&[0.0]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let l = lagrangian(
            &spec,
            &DVector::zeros(1),
            m,
            &DVector::from_element(1, 1.0),
            0.0,
            &DVector::from_element(1, 2.0),
            &DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert_relative_eq!(l, 2.5, max_relative = 1e-14);
    }

    #[test]
    fn lagrangian_matches_independent_reevaluation() {
        let (f1, f2, f3) = (-0.2, 0.4, 1.1);
        let (s0, s1, s2, s3) = (0.5, 0.2, -0.1, 0.3);
        let (qq, qbar, r) = (0.7, 0.3, 0.9);
        let spec = scalar_spec(scalar_coeffs(f1, f2, f3, s0, s1, s2, s3), lq_scalar(qq, qbar, r));
        let ensemble = small_ensemble(&[0.9, -0.5, 0.2, 0.6]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let xbar = mean[0];
        let (x, v, p, q) = (0.35_f64, -0.8_f64, 1.4_f64, -0.6_f64);
        let s = 0.3;
        let l = lagrangian(
            &spec,
            &DVector::from_element(1, x),
            m,
            &DVector::from_element(1, v),
            s,
            &DVector::from_element(1, p),
            &DMatrix::from_element(1, 1, q),
        )
        .unwrap();
        // Straight-line scalar arithmetic, no shared code with the library
        // path.
        let drift = f1 * x + f2 * xbar + f3 * v;
        let sigma = s0 + s1 * x + s2 * xbar + s3 * v;
        let cost = 0.5 * qq * x * x + 0.5 * qbar * xbar * xbar + 0.5 * r * v * v;
        assert_relative_eq!(l, p * drift + q * sigma + cost, max_relative = 1e-13);
    }

    #[test]
    fn quadratic_minimizer_matches_closed_form() {
        // b = 1, r = 1, p = 2 gives v_hat = -b p / r = -2.
        let spec = scalar_spec(
            scalar_coeffs(0.0, 0.0, 1.0, 0.4, 0.0, 0.0, 0.0),
            lq_scalar(0.0, 0.0, 1.0),
        );
        let ensemble = small_ensemble(&[0.0]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let sol = minimize_control(
            &spec,
            &DVector::zeros(1),
            m,
            0.5,
            &DVector::from_element(1, 2.0),
            &DMatrix::zeros(1, 1),
            &ControlOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(sol.v_hat[0], -2.0, epsilon = 1e-10);
        assert!(sol.foc_residual <= 1e-10);
    }

    #[test]
    fn zero_costates_leave_stationary_origin() {
        let spec = scalar_spec(
            scalar_coeffs(0.1, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0),
            lq_scalar(0.5, 0.0, 2.0),
        );
        let ensemble = small_ensemble(&[0.3, -0.3]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let sol = minimize_control(
            &spec,
            &DVector::from_element(1, 0.7),
            m,
            0.2,
            &DVector::zeros(1),
            &DMatrix::zeros(1, 1),
            &ControlOptions::default(),
        )
        .unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.v_hat[0], 0.0);
    }

    #[test]
    fn cubic_first_order_condition_matches_bisection() {
        // g = v^2/2 + 0.1 v^4, drift v, p = 1: the condition is
        // v + 0.4 v^3 + 1 = 0, solved here independently by bisection.
        let cost = quartic(0.0, 0.0, 0.0, 1.0, 0.4, 0.0, 0.0, 0.0);
        let spec = scalar_spec(scalar_coeffs(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0), cost);
        let ensemble = small_ensemble(&[0.0]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let sol = minimize_control(
            &spec,
            &DVector::zeros(1),
            m,
            0.0,
            &DVector::from_element(1, 1.0),
            &DMatrix::zeros(1, 1),
            &ControlOptions::default(),
        )
        .unwrap();
        let phi = |v: f64| v + 0.4 * v * v * v + 1.0;
        let (mut lo, mut hi) = (-2.0_f64, 0.0_f64);
        assert!(phi(lo) < 0.0 && phi(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        assert_relative_eq!(sol.v_hat[0], root, epsilon = 1e-9);
    }

    #[test]
    fn hamiltonian_completes_the_square() {
        // Drift b v, constant diffusion c, cost r v^2 / 2:
        // H = -(b p)^2 / (2 r) + q c.
        let spec = scalar_spec(
            scalar_coeffs(0.0, 0.0, 1.0, 0.7, 0.0, 0.0, 0.0),
            lq_scalar(0.0, 0.0, 1.0),
        );
        let ensemble = small_ensemble(&[0.0]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let p = DVector::from_element(1, 2.0);
        let opts = ControlOptions::default();
        let at_zero_q = hamiltonian(&spec, &DVector::zeros(1), m, 0.0, &p, &DMatrix::zeros(1, 1), &opts)
            .unwrap();
        assert_relative_eq!(at_zero_q.h, -2.0, epsilon = 1e-9);
        let q = DMatrix::from_element(1, 1, 0.3);
        let with_q = hamiltonian(&spec, &DVector::zeros(1), m, 0.0, &p, &q, &opts).unwrap();
        assert_relative_eq!(with_q.h, -2.0 + 0.3 * 0.7, epsilon = 1e-9);
        assert_relative_eq!(with_q.d_p_h[0], -2.0, epsilon = 1e-9);
        assert_relative_eq!(with_q.d_q_h[(0, 0)], 0.7, epsilon = 1e-12);
        assert_relative_eq!(with_q.d_x_h[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn costate_free_hamiltonian_is_minimized_cost() {
        let spec = scalar_spec(
            scalar_coeffs(0.3, 0.0, 1.0, 0.2, 0.0, 0.0, 0.0),
            lq_scalar(0.8, 0.0, 1.5),
        );
        let ensemble = small_ensemble(&[0.1, 0.9]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let x = DVector::from_element(1, 0.6);
        let eval = hamiltonian(
            &spec,
            &x,
            m,
            0.4,
            &DVector::zeros(1),
            &DMatrix::zeros(1, 1),
            &ControlOptions::default(),
        )
        .unwrap();
        // With p = q = 0 the minimizer of g in v is v = 0 for a pure
        // quadratic penalty, so H = g(x, m, 0).
        assert_relative_eq!(
            eval.h,
            spec.cost.g(x.as_slice(), m, &[0.0], 0.4),
            max_relative = 1e-12
        );
        assert_relative_eq!(eval.v_hat[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn envelope_derivatives_match_finite_differences() {
        // Quartic control cost so the minimizer moves nonlinearly with the
        // costates and the envelope identity is exercised for real.
        let cost = quartic(0.6, 0.3, 0.4, 1.2, 0.5, 0.7, 0.2, 0.3);
        let spec = scalar_spec(scalar_coeffs(-0.3, 0.2, 0.9, 0.4, 0.25, -0.15, 0.0), cost);
        let ensemble = small_ensemble(&[0.8, -0.4, 0.1, 0.5]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let opts = ControlOptions::default();
        let s = 0.35;
        let x0 = DVector::from_element(1, 0.45);
        let p0 = DVector::from_element(1, 0.9);
        let q0 = DMatrix::from_element(1, 1, -0.5);

        let h_at = |x: f64, p: f64, q: f64| -> f64 {
            hamiltonian(
                &spec,
                &DVector::from_element(1, x),
                m,
                s,
                &DVector::from_element(1, p),
                &DMatrix::from_element(1, 1, q),
                &opts,
            )
            .unwrap()
            .h
        };
        let eval = hamiltonian(&spec, &x0, m, s, &p0, &q0, &opts).unwrap();

        for &h in &[1e-3, 1e-4, 1e-5] {
            let fd_p = (h_at(x0[0], p0[0] + h, q0[(0, 0)]) - h_at(x0[0], p0[0] - h, q0[(0, 0)]))
                / (2.0 * h);
            let fd_q = (h_at(x0[0], p0[0], q0[(0, 0)] + h) - h_at(x0[0], p0[0], q0[(0, 0)] - h))
                / (2.0 * h);
            let fd_x = (h_at(x0[0] + h, p0[0], q0[(0, 0)]) - h_at(x0[0] - h, p0[0], q0[(0, 0)]))
                / (2.0 * h);
            let bound = 50.0 * h * h;
            assert!(
                (fd_p - eval.d_p_h[0]).abs() <= bound,
                "p derivative off by {:.3e} at h = {h:.0e}",
                (fd_p - eval.d_p_h[0]).abs()
            );
            assert!(
                (fd_q - eval.d_q_h[(0, 0)]).abs() <= bound,
                "q derivative off by {:.3e} at h = {h:.0e}",
                (fd_q - eval.d_q_h[(0, 0)]).abs()
            );
            assert!(
                (fd_x - eval.d_x_h[0]).abs() <= bound,
                "x derivative off by {:.3e} at h = {h:.0e}",
                (fd_x - eval.d_x_h[0]).abs()
            );
        }
    }

    #[test]
    fn minimizer_beats_random_controls_with_convexity_gap() {
        let cost = quartic(0.5, 0.2, 0.3, 1.0, 0.4, 0.6, 0.1, 0.2);
        let lambda = cost.lambda();
        let spec = scalar_spec(scalar_coeffs(0.2, -0.1, 1.0, 0.3, 0.1, 0.0, 0.0), cost);
        let ensemble = small_ensemble(&[0.7, -0.2, 0.4]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let opts = ControlOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let x = DVector::from_element(1, rng.gen::<f64>() * 2.0 - 1.0);
            let p = DVector::from_element(1, rng.gen::<f64>() * 4.0 - 2.0);
            let q = DMatrix::from_element(1, 1, rng.gen::<f64>() * 2.0 - 1.0);
            let s = rng.gen::<f64>();
            let sol = minimize_control(&spec, &x, m, s, &p, &q, &opts).unwrap();
            let best = lagrangian(&spec, &x, m, &sol.v_hat, s, &p, &q).unwrap();
            for _ in 0..100 {
                let v = DVector::from_element(1, rng.gen::<f64>() * 6.0 - 3.0);
                let l = lagrangian(&spec, &x, m, &v, s, &p, &q).unwrap();
                assert!(best <= l + 1e-9);
                let gap = l - best;
                let dist = (&v - &sol.v_hat).norm_squared();
                assert!(
                    gap + 1e-9 >= lambda * dist,
                    "convexity gap {gap:.3e} below {:.3e}",
                    lambda * dist
                );
            }
        }
    }

    #[test]
    fn minimizer_is_lipschitz_in_inputs() {
        let cost = quartic(0.5, 0.2, 0.3, 1.0, 0.4, 0.6, 0.1, 0.2);
        let spec = scalar_spec(scalar_coeffs(0.2, -0.1, 1.0, 0.3, 0.1, 0.0, 0.0), cost);
        let ensemble = small_ensemble(&[0.7, -0.2, 0.4]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let opts = ControlOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let draw = |rng: &mut ChaCha8Rng| rng.gen::<f64>() * 2.0 - 1.0;
            let (x, p, q) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let (dx, dp, dq) = (
                draw(&mut rng) * 0.2,
                draw(&mut rng) * 0.2,
                draw(&mut rng) * 0.2,
            );
            let solve = |x: f64, p: f64, q: f64, rng_s: f64| {
                minimize_control(
                    &spec,
                    &DVector::from_element(1, x),
                    m,
                    rng_s,
                    &DVector::from_element(1, p),
                    &DMatrix::from_element(1, 1, q),
                    &opts,
                )
                .unwrap()
                .v_hat[0]
            };
            let s = 0.5;
            let a = solve(x, p, q, s);
            let b = solve(x + dx, p + dp, q + dq, s);
            let denom = dx.abs() + dp.abs() + dq.abs();
            if denom > 1e-12 {
                worst = worst.max((b - a).abs() / denom);
            }
        }
        // The closure gain is at most |f3| / lambda plus the state
        // coupling; anything wildly larger flags a broken solve.
        assert!(worst <= 10.0, "Lipschitz ratio {worst:.3}");
        assert!(worst > 0.0);
    }

    #[test]
    fn measure_term_vanishes_without_coupling() {
        let cost = quartic(0.5, 0.1, 0.0, 1.0, 0.2, 0.3, 0.0, 0.0);
        let spec = scalar_spec(scalar_coeffs(0.3, 0.0, 1.0, 0.2, 0.1, 0.0, 0.0), cost);
        let ensemble = small_ensemble(&[0.4, -0.4]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let out = hamiltonian_measure_term(
            &spec,
            &DVector::from_element(1, 0.8),
            &DVector::from_element(1, -0.3),
            m,
            &DVector::from_element(1, 0.5),
            &DVector::from_element(1, 1.7),
            &DMatrix::from_element(1, 1, -0.9),
            0.3,
        )
        .unwrap();
        assert_relative_eq!(out[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn measure_term_recovers_scaled_costate() {
        // f2 = c I with everything else uncoupled returns c p.
        let spec = scalar_spec(
            scalar_coeffs(0.0, 2.5, 1.0, 0.0, 0.0, 0.0, 0.0),
            quartic(0.4, 0.0, 0.0, 1.0, 0.0, 0.2, 0.0, 0.0),
        );
        let ensemble = small_ensemble(&[0.0]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let out = hamiltonian_measure_term(
            &spec,
            &DVector::from_element(1, 0.8),
            &DVector::from_element(1, 0.1),
            m,
            &DVector::zeros(1),
            &DVector::from_element(1, 1.3),
            &DMatrix::zeros(1, 1),
            0.0,
        )
        .unwrap();
        assert_relative_eq!(out[0], 2.5 * 1.3, epsilon = 1e-12);
    }

    #[test]
    fn measure_term_matches_hand_expansion_for_quadratic_cost() {
        // For the quadratic mean cost the probe gradient of dg/dnu is
        // qbar xbar, donor independent, so the term expands by hand.
        let (f2, s2, qbar) = (0.6, -0.4, 0.9);
        let spec = scalar_spec(
            scalar_coeffs(0.2, f2, 1.0, 0.3, 0.1, s2, 0.0),
            lq_scalar(0.5, qbar, 1.0),
        );
        let ensemble = small_ensemble(&[0.9, 0.1, 0.5]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let xbar = mean[0];
        let (p, q) = (1.1, -0.7);
        let out = hamiltonian_measure_term(
            &spec,
            &DVector::from_element(1, 0.35),
            &DVector::from_element(1, -0.25),
            m,
            &DVector::from_element(1, 0.15),
            &DVector::from_element(1, p),
            &DMatrix::from_element(1, 1, q),
            0.6,
        )
        .unwrap();
        assert_relative_eq!(out[0], f2 * p + s2 * q + qbar * xbar, max_relative = 1e-12);
    }

    #[test]
    fn measure_derivative_of_hamiltonian_expands_for_quadratic_cost() {
        let (f2, s2, qbar) = (0.6, -0.4, 0.9);
        let spec = scalar_spec(
            scalar_coeffs(0.2, f2, 1.0, 0.3, 0.1, s2, 0.0),
            lq_scalar(0.5, qbar, 1.0),
        );
        let ensemble = small_ensemble(&[0.9, 0.1, 0.5]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let xbar = mean[0];
        let (p, q) = (1.1, -0.7);
        let opts = ControlOptions::default();
        let donor = DVector::from_element(1, -0.25);
        let value_at = |x_eval: f64| {
            dh_dnu(
                &spec,
                &donor,
                0.6,
                &DVector::from_element(1, p),
                &DMatrix::from_element(1, 1, q),
                &DVector::from_element(1, x_eval),
                m,
                &opts,
            )
            .unwrap()
        };
        // Hand expansion: x (f2 p + s2 q + qbar xbar); every summand is
        // linear in the probe for this cost, so the probe at zero gives
        // exactly zero.
        let x_eval = 0.8;
        assert_relative_eq!(
            value_at(x_eval),
            x_eval * (f2 * p + s2 * q + qbar * xbar),
            max_relative = 1e-12
        );
        assert_relative_eq!(value_at(0.0), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn measure_derivative_rejects_control_dependent_diffusion() {
        let spec = scalar_spec(
            scalar_coeffs(0.2, 0.1, 1.0, 0.3, 0.0, 0.0, 0.5),
            lq_scalar(0.5, 0.2, 1.0),
        );
        let ensemble = small_ensemble(&[0.4]);
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let err = dh_dnu(
            &spec,
            &DVector::zeros(1),
            0.1,
            &DVector::zeros(1),
            &DMatrix::zeros(1, 1),
            &DVector::from_element(1, 1.0),
            m,
            &ControlOptions::default(),
        );
        assert!(err.is_err());
    }
}
