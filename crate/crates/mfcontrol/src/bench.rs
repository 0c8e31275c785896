//! Closed-form and high-resolution oracles plus benchmark runners.
//!
//! Two independent references back the solver:
//!
//! - [`riccati_oracle`]: the linear-quadratic mean-field problem admits a
//!   closed-form solution through a pair of Riccati equations (one for the
//!   deviation from the mean, one for the mean itself). The derivation is
//!   worked out in `docs/lq-closed-form.md`; the oracle integrates the
//!   resulting ODEs with a classical fourth-order scheme on a fine grid.
//! - [`shooting_oracle`]: with zero diffusion the optimality system is a
//!   deterministic two-point boundary value problem per particle, coupled
//!   through ensemble means. A damped fixed-point sweep at high resolution
//!   solves it without any regression machinery, so it shares no code path
//!   with the solver it checks.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::ParticleEnsemble;
use crate::model::{CostModel, DynCoeffs, LinearDynamics, LqCost, ProblemSpec};

/// Parameters of the linear-quadratic mean-field benchmark
///
/// ```text
/// dynamics: dx = (a x + abar xbar + b v) ds + sum_j c_j dw_j
/// running:  1/2 x'q x + 1/2 xbar'qbar xbar + 1/2 v'r v
/// terminal: 1/2 x'qt x + 1/2 xbar'qbart xbar
/// ```
///
/// `c` holds the constant diffusion columns (column `j` drives noise `j`).
#[derive(Debug, Clone)]
pub struct LqParams {
    pub a: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_t: DMatrix<f64>,
    pub q_bar_t: DMatrix<f64>,
    pub horizon: f64,
}

impl LqParams {
    /// Scalar instance (state, control and noise all one-dimensional).
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        a: f64,
        a_bar: f64,
        b: f64,
        c: f64,
        q: f64,
        q_bar: f64,
        r: f64,
        q_t: f64,
        q_bar_t: f64,
        horizon: f64,
    ) -> Self {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        LqParams {
            a: m(a),
            a_bar: m(a_bar),
            b: m(b),
            c: m(c),
            q: m(q),
            q_bar: m(q_bar),
            r: m(r),
            q_t: m(q_t),
            q_bar_t: m(q_bar_t),
            horizon,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Builds the solver-facing problem for these parameters.
    pub fn spec(&self) -> Result<ProblemSpec> {
        let n = self.state_dim();
        let d = self.control_dim();
        let mut coeffs = DynCoeffs::zeros(n, d);
        coeffs.f1 = self.a.clone();
        coeffs.f2 = self.a_bar.clone();
        coeffs.f3 = self.b.clone();
        for j in 0..n {
            coeffs.sig0[j] = self.c.column(j).into_owned();
        }
        let bound = coeffs
            .max_block_norm()
            .max(self.q.norm())
            .max(self.q_bar.norm())
            .max(self.r.norm())
            .max(self.q_t.norm())
            .max(self.q_bar_t.norm())
            .max(1.0);
        let dynamics = LinearDynamics::constant(coeffs, bound * 1.01)?;
        let cost = Arc::new(LqCost::new(
            self.q.clone(),
            self.q_bar.clone(),
            self.r.clone(),
            self.q_t.clone(),
            self.q_bar_t.clone(),
        )?);
        ProblemSpec::new(dynamics, cost, self.horizon)
    }
}

/// Closed-form reference for the linear-quadratic benchmark.
///
/// `pi[k]`, `gamma[k]`, `chi[k]` hold the deviation Riccati matrix, the
/// mean Riccati matrix and the noise-induced value offset at `times[k]`;
/// `gain[k]`, `gain_bar[k]` are the feedback matrices acting on the
/// deviation and on the mean.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub pi: Vec<DMatrix<f64>>,
    pub gamma: Vec<DMatrix<f64>>,
    pub chi: Vec<f64>,
    pub gain: Vec<DMatrix<f64>>,
    pub gain_bar: Vec<DMatrix<f64>>,
    params: LqParams,
}

impl RiccatiSolution {
    fn index_at(&self, t: f64) -> usize {
        let steps = self.times.len() - 1;
        let t0 = self.times[0];
        let t1 = self.times[steps];
        let lambda = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        (lambda * steps as f64).round() as usize
    }

    /// Nearest-knot lookup; the grid is fine enough (ORACLE_REFINE times
    /// the solver grid) that snapping is below every test tolerance when
    /// `t` is a solver knot, which is the only use.
    pub fn pi_at(&self, t: f64) -> &DMatrix<f64> {
        &self.pi[self.index_at(t)]
    }

    pub fn gamma_at(&self, t: f64) -> &DMatrix<f64> {
        &self.gamma[self.index_at(t)]
    }

    pub fn chi_at(&self, t: f64) -> f64 {
        self.chi[self.index_at(t)]
    }

    pub fn gain_at(&self, t: f64) -> &DMatrix<f64> {
        &self.gain[self.index_at(t)]
    }

    pub fn gain_bar_at(&self, t: f64) -> &DMatrix<f64> {
        &self.gain_bar[self.index_at(t)]
    }

    /// Value of the control problem started at `ensemble` at time `t`.
    pub fn value(&self, ensemble: &ParticleEnsemble, t: f64) -> f64 {
        let mean = ensemble.ensemble_mean();
        let pi = self.pi_at(t);
        let gamma = self.gamma_at(t);
        let mut dev_term = 0.0;
        for i in 0..ensemble.len() {
            let d = DVector::from_column_slice(ensemble.atom(i)) - &mean;
            dev_term += ensemble.weights()[i] * (pi * &d).dot(&d);
        }
        0.5 * dev_term + 0.5 * (gamma * &mean).dot(&mean) + self.chi_at(t)
    }

    /// Optimal costate at a state given the population mean.
    pub fn costate(&self, x: &DVector<f64>, mean: &DVector<f64>, t: f64) -> DVector<f64> {
        let dev = x - mean;
        self.pi_at(t) * dev + self.gamma_at(t) * mean
    }

    /// Optimal feedback control at a state given the population mean.
    pub fn control(&self, x: &DVector<f64>, mean: &DVector<f64>, t: f64) -> DVector<f64> {
        let dev = x - mean;
        self.gain_at(t) * dev + self.gain_bar_at(t) * mean
    }

    /// Time derivative of the value at fixed ensemble, from the Riccati
    /// right-hand sides (no finite differences).
    pub fn value_time_derivative(&self, ensemble: &ParticleEnsemble, t: f64) -> f64 {
        let mean = ensemble.ensemble_mean();
        let pi = self.pi_at(t);
        let gamma = self.gamma_at(t);
        let (dpi, dgamma, dchi) = riccati_rhs(&self.params, pi, gamma);
        let mut dev_term = 0.0;
        for i in 0..ensemble.len() {
            let d = DVector::from_column_slice(ensemble.atom(i)) - &mean;
            dev_term += ensemble.weights()[i] * (&dpi * &d).dot(&d);
        }
        0.5 * dev_term + 0.5 * (&dgamma * &mean).dot(&mean) + dchi
    }
}

/// Oracle grid refinement relative to a solver grid.
pub const ORACLE_REFINE: usize = 10;

/// Right-hand sides of the backward ODE system `(d pi/dt, d gamma/dt,
/// d chi/dt)` at the given matrices.
fn riccati_rhs(
    p: &LqParams,
    pi: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let r_inv_bt = p
        .r
        .clone()
        .cholesky()
        .expect("r positive definite")
        .solve(&p.b.transpose());
    let s = &p.b * &r_inv_bt;
    let a_sum = &p.a + &p.a_bar;
    let dpi = -(&p.a.transpose() * pi) - pi * &p.a + pi * &s * pi - &p.q;
    let dgamma =
        -(&a_sum.transpose() * gamma) - gamma * &a_sum + gamma * &s * gamma - &p.q - &p.q_bar;
    let mut dchi = 0.0;
    for j in 0..p.state_dim() {
        let cj = p.c.column(j);
        dchi -= 0.5 * (pi * cj).dot(&cj.into_owned());
    }
    (dpi, dgamma, dchi)
}

fn integrate_riccati(p: &LqParams, steps: usize) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<f64>) {
    let n = p.state_dim();
    let h = p.horizon / steps as f64;
    let mut pi = vec![DMatrix::zeros(n, n); steps + 1];
    let mut gamma = vec![DMatrix::zeros(n, n); steps + 1];
    let mut chi = vec![0.0; steps + 1];
    pi[steps] = p.q_t.clone();
    gamma[steps] = &p.q_t + &p.q_bar_t;
    // Classical fourth-order step backwards in time.
    for k in (0..steps).rev() {
        let (p1, g1, c1) = riccati_rhs(p, &pi[k + 1], &gamma[k + 1]);
        let (p2, g2, c2) = riccati_rhs(
            p,
            &(&pi[k + 1] - &p1 * (h / 2.0)),
            &(&gamma[k + 1] - &g1 * (h / 2.0)),
        );
        let (p3, g3, c3) = riccati_rhs(
            p,
            &(&pi[k + 1] - &p2 * (h / 2.0)),
            &(&gamma[k + 1] - &g2 * (h / 2.0)),
        );
        let (p4, g4, c4) = riccati_rhs(
            p,
            &(&pi[k + 1] - &p3 * h),
            &(&gamma[k + 1] - &g3 * h),
        );
        pi[k] = &pi[k + 1] - (&p1 + &p2 * 2.0 + &p3 * 2.0 + &p4) * (h / 6.0);
        gamma[k] = &gamma[k + 1] - (&g1 + &g2 * 2.0 + &g3 * 2.0 + &g4) * (h / 6.0);
        chi[k] = chi[k + 1] - (c1 + 2.0 * c2 + 2.0 * c3 + c4) * (h / 6.0);
    }
    (pi, gamma, chi)
}

/// Integrates the two Riccati equations and the value offset backwards
/// from the horizon on a grid of `steps` intervals (pick
/// `ORACLE_REFINE * K` when checking a solver run with `K` steps).
pub fn riccati_oracle(params: &LqParams, steps: usize) -> Result<RiccatiSolution> {
    if params.r.clone().cholesky().is_none() {
        return Err(Error::NotConvex {
            detail: "LQ benchmark needs positive definite r".into(),
        });
    }
    if steps == 0 {
        return Err(Error::InvalidArgument {
            context: "riccati_oracle",
            detail: "steps must be positive".into(),
        });
    }
    let (pi, gamma, chi) = integrate_riccati(params, steps);
    let max_norm = pi
        .iter()
        .chain(gamma.iter())
        .map(|m| m.norm())
        .fold(0.0, f64::max);
    if !max_norm.is_finite() {
        return Err(Error::Unsupported {
            detail: "Riccati integration blew up (non-convex or too-long horizon)".into(),
        });
    }
    let r_chol = params.r.clone().cholesky().expect("checked above");
    let mut gain = Vec::with_capacity(steps + 1);
    let mut gain_bar = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        gain.push(-r_chol.solve(&(params.b.transpose() * &pi[k])));
        gain_bar.push(-r_chol.solve(&(params.b.transpose() * &gamma[k])));
    }
    let times = (0..=steps)
        .map(|k| params.horizon * k as f64 / steps as f64)
        .collect();
    Ok(RiccatiSolution {
        times,
        pi,
        gamma,
        chi,
        gain,
        gain_bar,
        params: params.clone(),
    })
}

/// Self-consistency measure of the oracle: sup-knot distance between the
/// solution at `steps` and at `2 * steps` intervals. Fourth-order stepping
/// drives this far below 1e-10 at any reasonable resolution.
pub fn riccati_refinement_gap(params: &LqParams, steps: usize) -> Result<f64> {
    let coarse = riccati_oracle(params, steps)?;
    let fine = riccati_oracle(params, 2 * steps)?;
    let mut gap: f64 = 0.0;
    for k in 0..coarse.times.len() {
        gap = gap
            .max((&coarse.pi[k] - &fine.pi[2 * k]).norm())
            .max((&coarse.gamma[k] - &fine.gamma[2 * k]).norm())
            .max((coarse.chi[k] - fine.chi[2 * k]).abs());
    }
    Ok(gap)
}

/// Deterministic Pontryagin reference for zero-diffusion problems.
///
/// States, costates and controls are stored per particle on the oracle
/// grid; `boundary_residual` is the sup-norm mismatch of the terminal
/// costate condition after the final sweep, `sup_change` the last
/// fixed-point update size.
#[derive(Debug, Clone)]
pub struct ShootingSolution {
    pub times: Vec<f64>,
    /// `[knot][particle]` states.
    pub states: Vec<Vec<DVector<f64>>>,
    pub costates: Vec<Vec<DVector<f64>>>,
    pub controls: Vec<Vec<DVector<f64>>>,
    pub boundary_residual: f64,
    pub sup_change: f64,
    pub iterations: usize,
}

impl ShootingSolution {
    /// Control of particle `i` at the stored knot nearest to `t`.
    pub fn control_at(&self, i: usize, t: f64) -> &DVector<f64> {
        let steps = self.times.len() - 1;
        let t0 = self.times[0];
        let t1 = self.times[steps];
        let lambda = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let k = ((lambda * steps as f64).round() as usize).min(steps - 1);
        &self.controls[k][i]
    }
}

/// Solves the deterministic optimality system for a zero-diffusion problem
/// by damped fixed-point iteration over the control trajectory.
///
/// Each sweep integrates the states forward and the costates backward with
/// a midpoint scheme, then refreshes the controls from the first-order
/// condition. `steps` should be about `ORACLE_REFINE` times the solver
/// grid being checked.
pub fn shooting_oracle(
    spec: &ProblemSpec,
    ensemble: &ParticleEnsemble,
    t0: f64,
    steps: usize,
    damping: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<ShootingSolution> {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let count = ensemble.len();
    let horizon = spec.horizon;
    if !(t0 < horizon) {
        return Err(Error::InvalidArgument {
            context: "shooting_oracle",
            detail: format!("t0 = {t0} must precede horizon {horizon}"),
        });
    }
    for j in 0..spec.noise_dim() {
        let c = spec.dynamics.coeffs_at(t0);
        if c.sig0[j].norm() != 0.0
            || c.sig1[j].norm() != 0.0
            || c.sig2[j].norm() != 0.0
            || c.sig3[j].norm() != 0.0
        {
            return Err(Error::Unsupported {
                detail: "shooting oracle requires zero diffusion".into(),
            });
        }
    }
    let h = (horizon - t0) / steps as f64;
    let times: Vec<f64> = (0..=steps)
        .map(|k| t0 + (horizon - t0) * k as f64 / steps as f64)
        .collect();
    let weights = ensemble.weights().to_vec();

    let mut controls = vec![vec![DVector::zeros(d); count]; steps];
    let mut states = vec![vec![DVector::zeros(n); count]; steps + 1];
    let mut costates = vec![vec![DVector::zeros(n); count]; steps + 1];
    for i in 0..count {
        states[0][i] = DVector::from_column_slice(ensemble.atom(i));
    }

    let ensemble_of = |atoms: &Vec<DVector<f64>>| -> Result<ParticleEnsemble> {
        let mut flat = Vec::with_capacity(count * n);
        for a in atoms {
            flat.extend_from_slice(a.as_slice());
        }
        ParticleEnsemble::new(
            &DMatrix::from_row_slice(count, n, &flat),
            weights.clone(),
            ensemble.generation_seed(),
        )
    };

    let mut sup_change = f64::INFINITY;
    let mut iterations = 0;
    let mut theta = damping;
    let mut prev_change = f64::INFINITY;
    for sweep in 0..max_sweeps {
        iterations = sweep + 1;
        // Forward midpoint pass under the current controls (controls are
        // treated as constant over each interval).
        for k in 0..steps {
            let s = times[k];
            let mean: DVector<f64> = {
                let mut mu = DVector::zeros(n);
                for i in 0..count {
                    mu += &states[k][i] * weights[i];
                }
                mu
            };
            // Half-step means reuse the start-of-interval mean; the induced
            // O(h^2) error is uniform and vanishes under refinement.
            let mut half = vec![DVector::zeros(n); count];
            for i in 0..count {
                let fk = spec.eval_drift(&states[k][i], &mean, &controls[k][i], s)?;
                half[i] = &states[k][i] + fk * (h / 2.0);
            }
            let mut half_mean = DVector::zeros(n);
            for i in 0..count {
                half_mean += &half[i] * weights[i];
            }
            for i in 0..count {
                let fm = spec.eval_drift(&half[i], &half_mean, &controls[k][i], s + h / 2.0)?;
                states[k + 1][i] = &states[k][i] + fm * h;
            }
        }
        // Terminal costates.
        let term_ens = ensemble_of(&states[steps])?;
        let term_mean = term_ens.ensemble_mean();
        let term_pop = term_ens.pop(&term_mean);
        for i in 0..count {
            let x = term_ens.atom(i);
            let mut p = spec.cost.d_x_term(x, term_pop);
            let mut avg = DVector::zeros(n);
            for j in 0..count {
                avg += spec.cost.d_mp_term(term_ens.atom(j), term_pop, x) * weights[j];
            }
            p += avg;
            costates[steps][i] = p;
        }
        // Backward midpoint pass. The driver at a knot uses the states and
        // controls stored for that knot.
        for k in (0..steps).rev() {
            let drv = |knot: usize, costate_ref: &Vec<DVector<f64>>| -> Result<Vec<DVector<f64>>> {
                let s = times[knot];
                let ens = ensemble_of(&states[knot])?;
                let mean = ens.ensemble_mean();
                let pop = ens.pop(&mean);
                let coeffs = spec.dynamics.coeffs_at(s);
                let vk = knot.min(steps - 1);
                let mut pbar = DVector::zeros(n);
                for j in 0..count {
                    pbar += &costate_ref[j] * weights[j];
                }
                let mut out = vec![DVector::zeros(n); count];
                for i in 0..count {
                    let x = ens.atom(i);
                    let mut rhs = coeffs.f1.transpose() * &costate_ref[i]
                        + spec.cost.d_x(x, pop, controls[vk][i].as_slice(), s)
                        + coeffs.f2.transpose() * &pbar;
                    let mut avg = DVector::zeros(n);
                    for j in 0..count {
                        avg += spec.cost.d_mp(
                            ens.atom(j),
                            pop,
                            controls[vk][j].as_slice(),
                            s,
                            x,
                        ) * weights[j];
                    }
                    rhs += avg;
                    out[i] = rhs;
                }
                Ok(out)
            };
            let d1 = drv(k + 1, &costates[k + 1])?;
            let mut half = vec![DVector::zeros(n); count];
            for i in 0..count {
                half[i] = &costates[k + 1][i] + &d1[i] * (h / 2.0);
            }
            // Midpoint driver: freeze states at knot k (midpoint states are
            // not stored; the O(h^2) bias vanishes under refinement).
            let d2 = drv(k, &half)?;
            for i in 0..count {
                costates[k][i] = &costates[k + 1][i] + &d2[i] * h;
            }
        }
        // Control refresh from the first-order condition.
        let mut change: f64 = 0.0;
        for k in 0..steps {
            let s = times[k];
            let ens = ensemble_of(&states[k])?;
            let mean = ens.ensemble_mean();
            let pop = ens.pop(&mean);
            let coeffs = spec.dynamics.coeffs_at(s);
            for i in 0..count {
                let x = ens.atom(i);
                let target = foc_solve(spec.cost.as_ref(), x, pop, s, &coeffs, &costates[k][i])?;
                let updated = &controls[k][i] * (1.0 - theta) + &target * theta;
                change = change.max((&updated - &controls[k][i]).norm());
                controls[k][i] = updated;
            }
        }
        sup_change = change;
        if change < tol {
            break;
        }
        // Back off whenever a sweep fails to contract (an oscillating
        // near-unit multiplier shows up as stagnating change norms) and
        // creep back toward the requested damping while contraction is
        // comfortable, so one plateau does not pin the step size at the
        // floor for the rest of the solve.
        if change > 0.95 * prev_change {
            theta = (theta * 0.5).max(0.02);
        } else if change < 0.5 * prev_change {
            theta = (theta * 1.2).min(damping);
        }
        prev_change = change;
    }
    // Boundary residual: terminal condition mismatch of the stored costates.
    let term_ens = ensemble_of(&states[steps])?;
    let term_mean = term_ens.ensemble_mean();
    let term_pop = term_ens.pop(&term_mean);
    let mut boundary_residual: f64 = 0.0;
    for i in 0..count {
        let x = term_ens.atom(i);
        let mut p = spec.cost.d_x_term(x, term_pop);
        let mut avg = DVector::zeros(n);
        for j in 0..count {
            avg += spec.cost.d_mp_term(term_ens.atom(j), term_pop, x) * weights[j];
        }
        p += avg;
        boundary_residual = boundary_residual.max((&p - &costates[steps][i]).norm());
    }
    Ok(ShootingSolution {
        times,
        states,
        costates,
        controls,
        boundary_residual,
        sup_change,
        iterations,
    })
}

/// Newton solve of the zero-diffusion first-order condition
/// `f3' p + D_v g = 0` at one point.
fn foc_solve(
    cost: &dyn CostModel,
    x: &[f64],
    pop: crate::measure::Pop<'_>,
    s: f64,
    coeffs: &DynCoeffs,
    p: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = cost.control_dim();
    let mut v = DVector::zeros(d);
    let lin = coeffs.f3.transpose() * p;
    for _ in 0..60 {
        let grad = &lin + cost.d_v(x, pop, v.as_slice(), s);
        if grad.norm() < 1e-12 {
            return Ok(v);
        }
        let hess = cost.d_vv(x, pop, v.as_slice(), s);
        let step = hess
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&grad))
            .ok_or_else(|| Error::NotConvex {
                detail: "control Hessian not positive definite in shooting oracle".into(),
            })?;
        v -= step;
    }
    let grad = &lin + cost.d_v(x, pop, v.as_slice(), s);
    if grad.norm() < 1e-9 {
        Ok(v)
    } else {
        Err(Error::NewtonDiverged {
            residual: grad.norm(),
            iterations: 60,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_riccati_closed_form() {
        // a = abar = 0, b = 1, c = 0, q = 0, r = 1, qt = 1, T = 1:
        // d pi/dt = pi^2 with pi(1) = 1 gives pi(t) = 1 / (2 - t).
        let params = LqParams::scalar(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0);
        let sol = riccati_oracle(&params, 500).unwrap();
        assert!((sol.pi_at(0.0)[(0, 0)] - 0.5).abs() < 1e-10);
        assert!((sol.pi_at(1.0)[(0, 0)] - 1.0).abs() < 1e-14);
        for &t in &[0.0, 0.25, 0.5, 0.75] {
            let exact = 1.0 / (2.0 - t);
            assert!(
                (sol.pi_at(t)[(0, 0)] - exact).abs() < 1e-10,
                "pi({t}) = {} vs {exact}",
                sol.pi_at(t)[(0, 0)]
            );
        }
    }

    #[test]
    fn riccati_zero_cost_is_zero() {
        let params = LqParams::scalar(0.3, 0.1, 1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0);
        let sol = riccati_oracle(&params, 200).unwrap();
        for k in 0..sol.times.len() {
            assert_eq!(sol.pi[k][(0, 0)], 0.0);
            assert_eq!(sol.gamma[k][(0, 0)], 0.0);
            assert_eq!(sol.chi[k], 0.0);
        }
    }

    #[test]
    fn riccati_refinement_is_converged() {
        let params = LqParams::scalar(0.4, -0.3, 1.0, 0.3, 1.0, 0.5, 1.0, 1.0, 0.5, 1.0);
        let gap = riccati_refinement_gap(&params, 500).unwrap();
        assert!(gap < 1e-10, "refinement gap {gap}");
    }

    #[test]
    fn riccati_value_matches_uncontrolled_monte_carlo_when_b_is_zero() {
        // With no control the value is the expected cost of the uncontrolled
        // flow; check it by direct sample-path averaging with independent
        // increments.
        use crate::paths::{BrownianBundle, StreamPurpose, TimeGrid};
        let params = LqParams::scalar(0.2, 0.0, 0.0, 0.4, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0);
        let sol = riccati_oracle(&params, 800).unwrap();
        let count = 20_000;
        let ens =
            ParticleEnsemble::gaussian(count, &DVector::from_vec(vec![0.3]), &DVector::from_vec(vec![0.5]), 11)
                .unwrap();
        let oracle_value = sol.value(&ens, 0.0);
        let k = 400;
        let grid = TimeGrid::new(0.0, 1.0, k).unwrap();
        let bundle = BrownianBundle::sample(count, &grid, 1, 77, StreamPurpose::Test);
        let dt = grid.dt();
        let mut cost_sum = 0.0;
        let mut x: Vec<f64> = (0..count).map(|i| ens.atom(i)[0]).collect();
        for step in 0..k {
            for i in 0..count {
                cost_sum += 0.5 * 1.0 * x[i] * x[i] * dt / count as f64;
                x[i] += 0.2 * x[i] * dt + 0.4 * bundle.increment(i, step)[0];
            }
        }
        for value in &x {
            cost_sum += 0.5 * 1.0 * value * value / count as f64;
        }
        let rel = (cost_sum - oracle_value).abs() / oracle_value.abs();
        assert!(
            rel < 0.02,
            "Monte Carlo {cost_sum} vs oracle {oracle_value} (rel {rel})"
        );
    }

    #[test]
    fn shooting_matches_riccati_on_deterministic_lq() {
        let params = LqParams::scalar(0.3, 0.2, 1.0, 0.0, 1.0, 0.4, 1.0, 1.0, 0.3, 1.0);
        let spec = params.spec().unwrap();
        let sol = riccati_oracle(&params, 1000).unwrap();
        let ens = ParticleEnsemble::from_flat(vec![-0.5, 0.2, 0.9, 1.4], 1, 3).unwrap();
        let shot = shooting_oracle(&spec, &ens, 0.0, 400, 0.5, 1e-12, 300).unwrap();
        assert!(shot.sup_change < 1e-12, "fixed point stalled at {}", shot.sup_change);
        // Controls against the closed form at a few knots.
        let mut worst: f64 = 0.0;
        for &k in &[0usize, 100, 200, 399] {
            let t = shot.times[k];
            // Population mean at that knot.
            let mut mean = DVector::zeros(1);
            for i in 0..ens.len() {
                mean += &shot.states[k][i] * ens.weights()[i];
            }
            for i in 0..ens.len() {
                let expect = sol.control(&shot.states[k][i], &mean, t);
                worst = worst.max((&shot.controls[k][i] - expect).norm());
            }
        }
        assert!(worst < 2e-3, "control mismatch {worst}");
    }
}
