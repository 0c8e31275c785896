//! Linearized solution maps along a solved base system: directional
//! derivatives in the initial ensemble, per-particle state Jacobians, the
//! response to injecting mass at an anchor point, and the mixed
//! second-order response of the state Jacobian to the same injection.
//!
//! Every map is an affine forward-backward system along the base solution
//! and runs through [`solve_linear_fbsde`], so flows inherit the solver's
//! regression, damping and determinism guarantees. This module owns the
//! coefficient assembly: Hessian stacks of the running cost along the base
//! paths, coupling kernels of the measure interaction, the anchor
//! trajectory realized through the solved ensemble, and the frozen source
//! terms that first-order flow solutions contribute to the second-order
//! system.
//!
//! Sources built from the anchor enter in centered form: every kernel
//! evaluation at the anchor is paired with the matching ensemble average,
//! so the systems respond to the signed measure `delta_anchor - m` and are
//! insensitive to the additive representative each measure-derivative
//! callback happens to return.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbsde::{
    continuation_solve, solve_linear_fbsde, terminal_controls, AffineFlowDriver, FbsdeSolution,
    FlowFrame, FlowKind, LinearFlowSolution, SolverOptions,
};
use crate::hamiltonian::{minimize_control_from, ControlOptions};
use crate::measure::{ParticleEnsemble, Pop};
use crate::model::{InteractionKind, ProblemSpec};
use crate::paths::{BrownianBundle, StreamPurpose, TimeGrid};

// ---------------------------------------------------------------------------
// Small dense kernels

#[inline]
fn chunk(flat: &[f64], i: usize, dim: usize) -> &[f64] {
    &flat[i * dim..(i + 1) * dim]
}

/// Column `j` of particle `i`'s column-major `n x noise` martingale block.
#[inline]
fn q_col(flat: &[f64], i: usize, j: usize, n: usize, noise: usize) -> &[f64] {
    let base = i * n * noise + j * n;
    &flat[base..base + n]
}

/// `out += w * m * x`.
fn acc_scaled_mv(out: &mut DVector<f64>, m: &DMatrix<f64>, x: &[f64], w: f64) {
    debug_assert_eq!(m.ncols(), x.len());
    debug_assert_eq!(m.nrows(), out.len());
    for c in 0..m.ncols() {
        let xc = w * x[c];
        if xc == 0.0 {
            continue;
        }
        for r in 0..m.nrows() {
            out[r] += m[(r, c)] * xc;
        }
    }
}

/// `out += m * x`.
fn acc_mv(out: &mut DVector<f64>, m: &DMatrix<f64>, x: &[f64]) {
    acc_scaled_mv(out, m, x, 1.0);
}

/// `out += w * m^T x`.
fn acc_scaled_mtv(out: &mut DVector<f64>, m: &DMatrix<f64>, x: &[f64], w: f64) {
    debug_assert_eq!(m.nrows(), x.len());
    debug_assert_eq!(m.ncols(), out.len());
    for c in 0..m.ncols() {
        let mut a = 0.0;
        for r in 0..m.nrows() {
            a += m[(r, c)] * x[r];
        }
        out[c] += w * a;
    }
}

/// `out += m^T x`.
fn acc_mtv(out: &mut DVector<f64>, m: &DMatrix<f64>, x: &[f64]) {
    acc_scaled_mtv(out, m, x, 1.0);
}

fn require_converged(base: &FbsdeSolution) -> Result<()> {
    if base.diagnostics.converged {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            context: "flow base",
            detail: "base solution did not converge; flows linearize along a fixed point".into(),
        })
    }
}

/// Control of particle `i` at knot `k`: the stored interval control at
/// interior knots, the exact terminal minimizer at the last knot.
#[inline]
fn control_at<'a>(base: &'a FbsdeSolution, term_v: &'a [f64], k: usize, i: usize, d: usize) -> &'a [f64] {
    if k < base.grid.steps {
        base.v_hat.at(k, i)
    } else {
        chunk(term_v, i, d)
    }
}

// ---------------------------------------------------------------------------
// Perturbation data

/// Ensemble-wide perturbation direction: one vector per particle, flat
/// `[particle][component]`.
#[derive(Debug, Clone)]
pub struct DirectionField {
    flat: Vec<f64>,
    count: usize,
    dim: usize,
}

impl DirectionField {
    pub fn new(flat: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || flat.is_empty() || flat.len() % dim != 0 {
            return Err(Error::InvalidArgument {
                context: "DirectionField::new",
                detail: format!("flat length {} incompatible with dim {}", flat.len(), dim),
            });
        }
        let count = flat.len() / dim;
        Ok(DirectionField { flat, count, dim })
    }

    /// Same displacement for every particle.
    pub fn constant(count: usize, dir: &DVector<f64>) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument {
                context: "DirectionField::constant",
                detail: "need at least one particle".into(),
            });
        }
        let dim = dir.len();
        let mut flat = Vec::with_capacity(count * dim);
        for _ in 0..count {
            flat.extend_from_slice(dir.as_slice());
        }
        Self::new(flat, dim)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        chunk(&self.flat, i, self.dim)
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }
}

/// Trajectory of an auxiliary particle carried through the solved
/// ensemble: states, costate and martingale predictions, and minimizing
/// controls at every knot. The particle carries no weight, so the base
/// solution is unchanged; its Brownian stream is the one an `N + 1`
/// particle re-solve of the enlarged ensemble would assign to the added
/// atom, which keeps difference quotients against such re-solves on
/// common random numbers.
#[derive(Debug, Clone)]
pub struct AnchorPath {
    pub y: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
    /// Column-major `state_dim x noise_dim` blocks.
    pub q: Vec<DMatrix<f64>>,
    pub v: Vec<DVector<f64>>,
}

/// Simulates the anchor particle started at `xi` through a solved base:
/// forward Euler under the base dynamics against the running ensemble
/// mean, costates from the fitted policy at interior knots and from the
/// exact terminal operator at the last knot, controls minimized per knot.
pub fn simulate_anchor(
    spec: &ProblemSpec,
    base: &FbsdeSolution,
    xi: &DVector<f64>,
    copts: &ControlOptions,
) -> Result<AnchorPath> {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    if xi.len() != n {
        return Err(Error::dim("simulate_anchor", format!("{n}"), format!("{}", xi.len())));
    }
    let count = base.weights.len();
    let steps = base.grid.steps;
    let dt = base.grid.dt();
    let ext = BrownianBundle::sample(count + 1, &base.grid, noise, base.seed, StreamPurpose::Brownian);
    let cost = &*spec.cost;
    let bsize = base.policy.basis.feature_count(base.policy.input_dim);
    let mut feat = vec![0.0; bsize];
    let mut y = Vec::with_capacity(steps + 1);
    let mut p = Vec::with_capacity(steps + 1);
    let mut q = Vec::with_capacity(steps + 1);
    let mut v = Vec::with_capacity(steps + 1);
    let mut cur = xi.clone();
    let mut warm = DVector::zeros(d);
    for k in 0..=steps {
        let s = base.grid.knot(k);
        let yk = base.y.knot_slice(k);
        let mean = &base.means[k];
        let pop = Pop::new(yk, n, &base.weights, mean.as_slice());
        let (pk, qk) = if k < steps {
            let mut pbuf = vec![0.0; n];
            base.policy.eval_p_into(k, cur.as_slice(), &mut feat, &mut pbuf);
            let mut qbuf = vec![0.0; n * noise];
            base.policy.eval_q_into(k, cur.as_slice(), &mut feat, &mut qbuf);
            (
                DVector::from_column_slice(&pbuf),
                DMatrix::from_column_slice(n, noise, &qbuf),
            )
        } else {
            let mut term = cost.d_x_term(cur.as_slice(), pop);
            match cost.interaction() {
                InteractionKind::MeasureFree => {}
                InteractionKind::MeanCoupled => {
                    // probe-independent kernel; evaluate at the mean
                    for (j, &wj) in base.weights.iter().enumerate() {
                        let xj = chunk(yk, j, n);
                        term.axpy(wj, &cost.d_mp_term(xj, pop, mean.as_slice()), 1.0);
                    }
                }
                InteractionKind::General => {
                    for (j, &wj) in base.weights.iter().enumerate() {
                        let xj = chunk(yk, j, n);
                        term.axpy(wj, &cost.d_mp_term(xj, pop, cur.as_slice()), 1.0);
                    }
                }
            }
            (term, DMatrix::zeros(n, noise))
        };
        let ctl = minimize_control_from(spec, &cur, pop, s, &pk, &qk, &warm, copts)?;
        warm = ctl.v_hat.clone();
        y.push(cur.clone());
        p.push(pk);
        q.push(qk);
        v.push(ctl.v_hat);
        if k < steps {
            let drift = spec.eval_drift(&cur, mean, &v[k], s)?;
            let mut next = &cur + drift * dt;
            let dw = ext.increment(count, k);
            for j in 0..noise {
                let col = spec.eval_diffusion_col(j, &cur, mean, &v[k], s)?;
                next += col * dw[j];
            }
            if next.iter().any(|z| !z.is_finite()) {
                return Err(Error::ForwardDiverged { step: k });
            }
            cur = next;
        }
    }
    Ok(AnchorPath { y, p, q, v })
}

// ---------------------------------------------------------------------------
// Frozen coefficient stacks along the base solution

/// Second-derivative blocks of the running cost per knot and particle,
/// with the control block factored once. The terminal knot evaluates the
/// running cost at the horizon with the exact terminal controls; the
/// terminal cost's state Hessian is kept separately.
struct HessianStacks {
    hxx: Vec<Vec<DMatrix<f64>>>,
    hxv: Vec<Vec<DMatrix<f64>>>,
    hvv: Vec<Vec<Cholesky<f64, Dyn>>>,
    term_hxx: Vec<DMatrix<f64>>,
}

impl HessianStacks {
    fn build(spec: &ProblemSpec, base: &FbsdeSolution, term_v: &[f64]) -> Result<Self> {
        let n = spec.state_dim();
        let d = spec.control_dim();
        let count = base.weights.len();
        let steps = base.grid.steps;
        let cost = &*spec.cost;
        let mut hxx = Vec::with_capacity(steps + 1);
        let mut hxv = Vec::with_capacity(steps + 1);
        let mut hvv = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let s = base.grid.knot(k);
            let yk = base.y.knot_slice(k);
            let mean = base.means[k].as_slice();
            let rows: Vec<(DMatrix<f64>, DMatrix<f64>, Cholesky<f64, Dyn>)> = (0..count)
                .into_par_iter()
                .map(|i| -> Result<_> {
                    let pop = Pop::new(yk, n, &base.weights, mean);
                    let x = chunk(yk, i, n);
                    let v = control_at(base, term_v, k, i, d);
                    let xx = cost.d_xx(x, pop, v, s);
                    let xv = cost.d_xv(x, pop, v, s);
                    let vv = cost.d_vv(x, pop, v, s).cholesky().ok_or_else(|| Error::NotConvex {
                        detail: format!(
                            "control Hessian of particle {i} at knot {k} is not positive definite"
                        ),
                    })?;
                    Ok((xx, xv, vv))
                })
                .collect::<Result<_>>()?;
            let mut xxs = Vec::with_capacity(count);
            let mut xvs = Vec::with_capacity(count);
            let mut vvs = Vec::with_capacity(count);
            for (xx, xv, vv) in rows {
                xxs.push(xx);
                xvs.push(xv);
                vvs.push(vv);
            }
            hxx.push(xxs);
            hxv.push(xvs);
            hvv.push(vvs);
        }
        let yk = base.y.knot_slice(steps);
        let mean = base.means[steps].as_slice();
        let term_hxx: Vec<DMatrix<f64>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let pop = Pop::new(yk, n, &base.weights, mean);
                cost.d_xx_term(chunk(yk, i, n), pop)
            })
            .collect();
        Ok(HessianStacks {
            hxx,
            hxv,
            hvv,
            term_hxx,
        })
    }
}

/// First measure-derivative kernels of a mean-coupled cost. All probe
/// gradients are probe-independent, so one evaluation at the knot mean
/// per receiving particle covers every probe, and nested averages
/// collapse onto flow averages.
struct MeanStacks {
    /// `d_mxp` per knot and receiver.
    mxp: Vec<Vec<DMatrix<f64>>>,
    /// `d_mvp` per knot and receiver.
    mvp: Vec<Vec<DMatrix<f64>>>,
    /// Donor-averaged `d_mmpq` per knot; constant in both probes.
    mmpq: Vec<DMatrix<f64>>,
    term_mxp: Vec<DMatrix<f64>>,
    term_mmpq: DMatrix<f64>,
}

/// Full pairwise kernel grids for costs without declared structure. The
/// probe-Hessian family is also stacked here; for mean-coupled costs it
/// vanishes identically, which is why the structured path has no
/// counterpart.
struct PairStacks {
    count: usize,
    /// `d_mxp(x_i, .)(x_l)` per knot, flat `[receiver][probe]`.
    mxp: Vec<Vec<DMatrix<f64>>>,
    /// `d_mvp(x_i, .)(x_l)` per knot, flat `[receiver][probe]`.
    mvp: Vec<Vec<DMatrix<f64>>>,
    /// Donor-averaged `d_mmpq(. , x_i, x_l)` per knot, flat
    /// `[probe_p][probe_q]`.
    mmpq: Vec<Vec<DMatrix<f64>>>,
    /// Donor-averaged `d_mpp(. , x_i)` per knot and probe.
    pp: Vec<Vec<DMatrix<f64>>>,
    term_mxp: Vec<DMatrix<f64>>,
    term_mmpq: Vec<DMatrix<f64>>,
    term_pp: Vec<DMatrix<f64>>,
}

/// Measure-coupling kernels of the cost along the base solution, stacked
/// according to the declared interaction structure.
enum CouplingStacks {
    None,
    Mean(MeanStacks),
    Pair(PairStacks),
}

impl CouplingStacks {
    fn build(spec: &ProblemSpec, base: &FbsdeSolution, term_v: &[f64]) -> Result<Self> {
        match spec.cost.interaction() {
            InteractionKind::MeasureFree => Ok(CouplingStacks::None),
            InteractionKind::MeanCoupled => Self::build_mean(spec, base, term_v),
            InteractionKind::General => Self::build_pair(spec, base, term_v),
        }
    }

    fn build_mean(spec: &ProblemSpec, base: &FbsdeSolution, term_v: &[f64]) -> Result<Self> {
        let n = spec.state_dim();
        let d = spec.control_dim();
        let count = base.weights.len();
        let steps = base.grid.steps;
        let cost = &*spec.cost;
        let mut mxp = Vec::with_capacity(steps + 1);
        let mut mvp = Vec::with_capacity(steps + 1);
        let mut mmpq = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let s = base.grid.knot(k);
            let yk = base.y.knot_slice(k);
            let mean = base.means[k].as_slice();
            let rows: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..count)
                .into_par_iter()
                .map(|i| {
                    let pop = Pop::new(yk, n, &base.weights, mean);
                    let x = chunk(yk, i, n);
                    let v = control_at(base, term_v, k, i, d);
                    (cost.d_mxp(x, pop, v, s, mean), cost.d_mvp(x, pop, v, s, mean))
                })
                .collect();
            let mut xs = Vec::with_capacity(count);
            let mut vs = Vec::with_capacity(count);
            for (a, b) in rows {
                xs.push(a);
                vs.push(b);
            }
            let pop = Pop::new(yk, n, &base.weights, mean);
            let mut avg = DMatrix::zeros(n, n);
            for (j, &wj) in base.weights.iter().enumerate() {
                let xj = chunk(yk, j, n);
                let vj = control_at(base, term_v, k, j, d);
                avg += cost.d_mmpq(xj, pop, vj, s, mean, mean) * wj;
            }
            mxp.push(xs);
            mvp.push(vs);
            mmpq.push(avg);
        }
        let yk = base.y.knot_slice(steps);
        let mean = base.means[steps].as_slice();
        let term_mxp: Vec<DMatrix<f64>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let pop = Pop::new(yk, n, &base.weights, mean);
                cost.d_mxp_term(chunk(yk, i, n), pop, mean)
            })
            .collect();
        let pop = Pop::new(yk, n, &base.weights, mean);
        let mut term_mmpq = DMatrix::zeros(n, n);
        for (j, &wj) in base.weights.iter().enumerate() {
            let xj = chunk(yk, j, n);
            term_mmpq += cost.d_mmpq_term(xj, pop, mean, mean) * wj;
        }
        Ok(CouplingStacks::Mean(MeanStacks {
            mxp,
            mvp,
            mmpq,
            term_mxp,
            term_mmpq,
        }))
    }

    fn build_pair(spec: &ProblemSpec, base: &FbsdeSolution, term_v: &[f64]) -> Result<Self> {
        let n = spec.state_dim();
        let d = spec.control_dim();
        let count = base.weights.len();
        let steps = base.grid.steps;
        let cost = &*spec.cost;
        let mut mxp = Vec::with_capacity(steps + 1);
        let mut mvp = Vec::with_capacity(steps + 1);
        let mut mmpq = Vec::with_capacity(steps + 1);
        let mut pp = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let s = base.grid.knot(k);
            let yk = base.y.knot_slice(k);
            let mean = base.means[k].as_slice();
            let rows: Vec<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DMatrix<f64>)> =
                (0..count)
                    .into_par_iter()
                    .map(|i| {
                        let pop = Pop::new(yk, n, &base.weights, mean);
                        let xi = chunk(yk, i, n);
                        let vi = control_at(base, term_v, k, i, d);
                        let mut xrow = Vec::with_capacity(count);
                        let mut vrow = Vec::with_capacity(count);
                        let mut qrow = Vec::with_capacity(count);
                        for l in 0..count {
                            let xl = chunk(yk, l, n);
                            xrow.push(cost.d_mxp(xi, pop, vi, s, xl));
                            vrow.push(cost.d_mvp(xi, pop, vi, s, xl));
                            let mut acc = DMatrix::zeros(n, n);
                            for (j, &wj) in base.weights.iter().enumerate() {
                                let xj = chunk(yk, j, n);
                                let vj = control_at(base, term_v, k, j, d);
                                acc += cost.d_mmpq(xj, pop, vj, s, xi, xl) * wj;
                            }
                            qrow.push(acc);
                        }
                        let mut psum = DMatrix::zeros(n, n);
                        for (j, &wj) in base.weights.iter().enumerate() {
                            let xj = chunk(yk, j, n);
                            let vj = control_at(base, term_v, k, j, d);
                            psum += cost.d_mpp(xj, pop, vj, s, xi) * wj;
                        }
                        (xrow, vrow, qrow, psum)
                    })
                    .collect();
            let mut xg = Vec::with_capacity(count * count);
            let mut vg = Vec::with_capacity(count * count);
            let mut qg = Vec::with_capacity(count * count);
            let mut pg = Vec::with_capacity(count);
            for (xrow, vrow, qrow, psum) in rows {
                xg.extend(xrow);
                vg.extend(vrow);
                qg.extend(qrow);
                pg.push(psum);
            }
            mxp.push(xg);
            mvp.push(vg);
            mmpq.push(qg);
            pp.push(pg);
        }
        let yk = base.y.knot_slice(steps);
        let mean = base.means[steps].as_slice();
        let rows: Vec<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DMatrix<f64>)> = (0..count)
            .into_par_iter()
            .map(|i| {
                let pop = Pop::new(yk, n, &base.weights, mean);
                let xi = chunk(yk, i, n);
                let mut xrow = Vec::with_capacity(count);
                let mut qrow = Vec::with_capacity(count);
                for l in 0..count {
                    let xl = chunk(yk, l, n);
                    xrow.push(cost.d_mxp_term(xi, pop, xl));
                    let mut acc = DMatrix::zeros(n, n);
                    for (j, &wj) in base.weights.iter().enumerate() {
                        let xj = chunk(yk, j, n);
                        acc += cost.d_mmpq_term(xj, pop, xi, xl) * wj;
                    }
                    qrow.push(acc);
                }
                let mut psum = DMatrix::zeros(n, n);
                for (j, &wj) in base.weights.iter().enumerate() {
                    let xj = chunk(yk, j, n);
                    psum += cost.d_mpp_term(xj, pop, xi) * wj;
                }
                (xrow, qrow, psum)
            })
            .collect();
        let mut term_mxp = Vec::with_capacity(count * count);
        let mut term_mmpq = Vec::with_capacity(count * count);
        let mut term_pp = Vec::with_capacity(count);
        for (xrow, qrow, psum) in rows {
            term_mxp.extend(xrow);
            term_mmpq.extend(qrow);
            term_pp.push(psum);
        }
        Ok(CouplingStacks::Pair(PairStacks {
            count,
            mxp,
            mvp,
            mmpq,
            pp,
            term_mxp,
            term_mmpq,
            term_pp,
        }))
    }

    /// `out += avg_l d_mxp(x_i, .)(x_l) u_l`.
    fn add_mxp_receive(
        &self,
        k: usize,
        i: usize,
        dy: &[f64],
        dy_avg: &[f64],
        weights: &[f64],
        n: usize,
        out: &mut DVector<f64>,
    ) {
        match self {
            CouplingStacks::None => {}
            CouplingStacks::Mean(m) => acc_mv(out, &m.mxp[k][i], dy_avg),
            CouplingStacks::Pair(p) => {
                for (l, &wl) in weights.iter().enumerate() {
                    acc_scaled_mv(out, &p.mxp[k][i * p.count + l], chunk(dy, l, n), wl);
                }
            }
        }
    }

    /// `out += sum_j w_j d_mxp(x_j, .)(x_i)^T u_j`.
    fn add_mxp_donate(
        &self,
        k: usize,
        i: usize,
        dy: &[f64],
        weights: &[f64],
        n: usize,
        out: &mut DVector<f64>,
    ) {
        match self {
            CouplingStacks::None => {}
            CouplingStacks::Mean(m) => {
                for (j, &wj) in weights.iter().enumerate() {
                    acc_scaled_mtv(out, &m.mxp[k][j], chunk(dy, j, n), wj);
                }
            }
            CouplingStacks::Pair(p) => {
                for (j, &wj) in weights.iter().enumerate() {
                    acc_scaled_mtv(out, &p.mxp[k][j * p.count + i], chunk(dy, j, n), wj);
                }
            }
        }
    }

    /// `out += avg_l d_mvp(x_i, .)(x_l) u_l`.
    fn add_mvp_receive(
        &self,
        k: usize,
        i: usize,
        dy: &[f64],
        dy_avg: &[f64],
        weights: &[f64],
        n: usize,
        out: &mut DVector<f64>,
    ) {
        match self {
            CouplingStacks::None => {}
            CouplingStacks::Mean(m) => acc_mv(out, &m.mvp[k][i], dy_avg),
            CouplingStacks::Pair(p) => {
                for (l, &wl) in weights.iter().enumerate() {
                    acc_scaled_mv(out, &p.mvp[k][i * p.count + l], chunk(dy, l, n), wl);
                }
            }
        }
    }

    /// `out += sum_j w_j d_mvp(x_j, .)(x_i)^T dv_j`.
    fn add_mvp_donate(
        &self,
        k: usize,
        i: usize,
        dv: &[f64],
        weights: &[f64],
        d: usize,
        out: &mut DVector<f64>,
    ) {
        match self {
            CouplingStacks::None => {}
            CouplingStacks::Mean(m) => {
                for (j, &wj) in weights.iter().enumerate() {
                    acc_scaled_mtv(out, &m.mvp[k][j], chunk(dv, j, d), wj);
                }
            }
            CouplingStacks::Pair(p) => {
                for (j, &wj) in weights.iter().enumerate() {
                    acc_scaled_mtv(out, &p.mvp[k][j * p.count + i], chunk(dv, j, d), wj);
                }
            }
        }
    }

    /// `out += sum_j w_j avg_l d_mmpq(x_j, .)(x_i, x_l) u_l`.
    fn add_mmpq_move(
        &self,
        k: usize,
        i: usize,
        dy: &[f64],
        dy_avg: &[f64],
        weights: &[f64],
        n: usize,
        out: &mut DVector<f64>,
    ) {
        match self {
            CouplingStacks::None => {}
            CouplingStacks::Mean(m) => acc_mv(out, &m.mmpq[k], dy_avg),
            CouplingStacks::Pair(p) => {
                for (l, &wl) in weights.iter().enumerate() {
                    acc_scaled_mv(out, &p.mmpq[k][i * p.count + l], chunk(dy, l, n), wl);
                }
            }
        }
    }

    /// `out += [sum_j w_j d_mpp(x_j, .)(x_i)] u_i`. Identically zero for
    /// mean-coupled costs: their probe gradients are probe-independent.
    fn add_pp_move(&self, k: usize, i: usize, u_i: &[f64], out: &mut DVector<f64>) {
        if let CouplingStacks::Pair(p) = self {
            acc_mv(out, &p.pp[k][i], u_i);
        }
    }

    fn add_term_mxp_receive(
        &self,
        i: usize,
        dy: &[f64],
        dy_avg: &[f64],
        weights: &[f64],
        n: usize,
        out: &mut DVector<f64>,
    ) {
        match self {
            CouplingStacks::None => {}
            CouplingStacks::Mean(m) => acc_mv(out, &m.term_mxp[i], dy_avg),
            CouplingStacks::Pair(p) => {
                for (l, &wl) in weights.iter().enumerate() {
                    acc_scaled_mv(out, &p.term_mxp[i * p.count + l], chunk(dy, l, n), wl);
                }
            }
        }
    }

    fn add_term_mxp_donate(
        &self,
        i: usize,
        dy: &[f64],
        weights: &[f64],
        n: usize,
        out: &mut DVector<f64>,
    ) {
        match self {
            CouplingStacks::None => {}
            CouplingStacks::Mean(m) => {
                for (j, &wj) in weights.iter().enumerate() {
                    acc_scaled_mtv(out, &m.term_mxp[j], chunk(dy, j, n), wj);
                }
            }
            CouplingStacks::Pair(p) => {
                for (j, &wj) in weights.iter().enumerate() {
                    acc_scaled_mtv(out, &p.term_mxp[j * p.count + i], chunk(dy, j, n), wj);
                }
            }
        }
    }

    fn add_term_mmpq_move(
        &self,
        i: usize,
        dy: &[f64],
        dy_avg: &[f64],
        weights: &[f64],
        n: usize,
        out: &mut DVector<f64>,
    ) {
        match self {
            CouplingStacks::None => {}
            CouplingStacks::Mean(m) => acc_mv(out, &m.term_mmpq, dy_avg),
            CouplingStacks::Pair(p) => {
                for (l, &wl) in weights.iter().enumerate() {
                    acc_scaled_mv(out, &p.term_mmpq[i * p.count + l], chunk(dy, l, n), wl);
                }
            }
        }
    }

    fn add_term_pp_move(&self, i: usize, u_i: &[f64], out: &mut DVector<f64>) {
        if let CouplingStacks::Pair(p) = self {
            acc_mv(out, &p.term_pp[i], u_i);
        }
    }

    fn pp_sum(&self, k: usize, i: usize) -> Option<&DMatrix<f64>> {
        match self {
            CouplingStacks::Pair(p) => Some(&p.pp[k][i]),
            _ => None,
        }
    }

    fn term_pp_sum(&self, i: usize) -> Option<&DMatrix<f64>> {
        match self {
            CouplingStacks::Pair(p) => Some(&p.term_pp[i]),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Anchor sources of the mass-injection system

/// Flow-independent source terms contributed by the anchor trajectory.
/// Every anchor evaluation is centered against the matching ensemble
/// average, and the dynamics' mean coupling picks up the anchor's costate
/// deviation from the ensemble costate mean.
struct AnchorSources {
    xi: DVector<f64>,
    /// Anchor state minus ensemble mean per knot; the forward mean shift.
    anchor_dev: Vec<DVector<f64>>,
    /// Additive control-equation source per knot and particle.
    ctl: Vec<Vec<DVector<f64>>>,
    /// Additive costate-driver source per knot and particle.
    drv: Vec<Vec<DVector<f64>>>,
    /// Additive terminal-operator source per particle.
    term: Vec<DVector<f64>>,
}

impl AnchorSources {
    fn build(
        spec: &ProblemSpec,
        base: &FbsdeSolution,
        term_v: &[f64],
        xi: &DVector<f64>,
        copts: &ControlOptions,
    ) -> Result<Self> {
        let n = spec.state_dim();
        let d = spec.control_dim();
        let noise = spec.noise_dim();
        let count = base.weights.len();
        let steps = base.grid.steps;
        let cost = &*spec.cost;
        let interaction = cost.interaction();
        let path = simulate_anchor(spec, base, xi, copts)?;
        let anchor_dev: Vec<DVector<f64>> = (0..=steps).map(|k| &path.y[k] - &base.means[k]).collect();
        let p_bar: Vec<DVector<f64>> = (0..=steps)
            .map(|k| base.p.weighted_mean(k, &base.weights))
            .collect();
        let q_bar: Vec<DVector<f64>> = (0..=steps)
            .map(|k| base.q.weighted_mean(k, &base.weights))
            .collect();
        let mut ctl = Vec::with_capacity(steps + 1);
        let mut drv = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let s = base.grid.knot(k);
            let coeffs = spec.dynamics.coeffs_at(s);
            let yk = base.y.knot_slice(k);
            let mean = base.means[k].as_slice();
            let ys = path.y[k].as_slice();
            let vs = path.v[k].as_slice();
            // Costate deviation of the anchor feeding back through the
            // dynamics' mean coupling.
            let pshift = &path.p[k] - &p_bar[k];
            let qflat = DVector::from_column_slice(path.q[k].as_slice());
            let qshift = qflat - &q_bar[k];
            let mut shift = DVector::zeros(n);
            acc_mtv(&mut shift, &coeffs.f2, pshift.as_slice());
            for j in 0..noise {
                acc_mtv(&mut shift, &coeffs.sig2[j], &qshift.as_slice()[j * n..(j + 1) * n]);
            }
            // Mean-coupled kernels with a donor argument are
            // receiver-independent; sweep the donors once per knot.
            let hoisted = if interaction == InteractionKind::MeanCoupled {
                let pop = Pop::new(yk, n, &base.weights, mean);
                let mut acc = cost.d_mp(ys, pop, vs, s, mean);
                for (j, &wj) in base.weights.iter().enumerate() {
                    let xj = chunk(yk, j, n);
                    let vj = control_at(base, term_v, k, j, d);
                    acc.axpy(-wj, &cost.d_mp(xj, pop, vj, s, mean), 1.0);
                    let moved = cost.d_mmp(xj, pop, vj, s, mean, ys)
                        - cost.d_mmp(xj, pop, vj, s, mean, mean);
                    acc.axpy(wj, &moved, 1.0);
                }
                Some(acc)
            } else {
                None
            };
            let rows: Vec<(DVector<f64>, DVector<f64>)> = (0..count)
                .into_par_iter()
                .map(|i| {
                    let pop = Pop::new(yk, n, &base.weights, mean);
                    let x = chunk(yk, i, n);
                    let v = control_at(base, term_v, k, i, d);
                    match interaction {
                        InteractionKind::MeasureFree => (DVector::zeros(d), shift.clone()),
                        InteractionKind::MeanCoupled => {
                            let cmv =
                                cost.d_mv(x, pop, v, s, ys) - cost.d_mv(x, pop, v, s, mean);
                            let cmx =
                                cost.d_mx(x, pop, v, s, ys) - cost.d_mx(x, pop, v, s, mean);
                            let mut dsrc = cmx + &shift;
                            dsrc += hoisted.as_ref().expect("mean-coupled hoisted sweep");
                            (cmv, dsrc)
                        }
                        InteractionKind::General => {
                            let mut cmv = cost.d_mv(x, pop, v, s, ys);
                            let mut cmx = cost.d_mx(x, pop, v, s, ys);
                            for (l, &wl) in base.weights.iter().enumerate() {
                                let xl = chunk(yk, l, n);
                                cmv.axpy(-wl, &cost.d_mv(x, pop, v, s, xl), 1.0);
                                cmx.axpy(-wl, &cost.d_mx(x, pop, v, s, xl), 1.0);
                            }
                            let mut inject = cost.d_mp(ys, pop, vs, s, x);
                            for (j, &wj) in base.weights.iter().enumerate() {
                                let xj = chunk(yk, j, n);
                                let vj = control_at(base, term_v, k, j, d);
                                inject.axpy(-wj, &cost.d_mp(xj, pop, vj, s, x), 1.0);
                            }
                            let mut moved = DVector::zeros(n);
                            for (j, &wj) in base.weights.iter().enumerate() {
                                let xj = chunk(yk, j, n);
                                let vj = control_at(base, term_v, k, j, d);
                                let mut inner = cost.d_mmp(xj, pop, vj, s, x, ys);
                                for (l, &wl) in base.weights.iter().enumerate() {
                                    let xl = chunk(yk, l, n);
                                    inner.axpy(-wl, &cost.d_mmp(xj, pop, vj, s, x, xl), 1.0);
                                }
                                moved.axpy(wj, &inner, 1.0);
                            }
                            (cmv, cmx + &shift + inject + moved)
                        }
                    }
                })
                .collect();
            let mut crow = Vec::with_capacity(count);
            let mut drow = Vec::with_capacity(count);
            for (c, dr) in rows {
                crow.push(c);
                drow.push(dr);
            }
            ctl.push(crow);
            drv.push(drow);
        }
        // Terminal-operator sources; no dynamics feedback at the horizon.
        let yk = base.y.knot_slice(steps);
        let mean = base.means[steps].as_slice();
        let ys = path.y[steps].as_slice();
        let hoisted_term = if interaction == InteractionKind::MeanCoupled {
            let pop = Pop::new(yk, n, &base.weights, mean);
            let mut acc = cost.d_mp_term(ys, pop, mean);
            for (j, &wj) in base.weights.iter().enumerate() {
                let xj = chunk(yk, j, n);
                acc.axpy(-wj, &cost.d_mp_term(xj, pop, mean), 1.0);
                let moved =
                    cost.d_mmp_term(xj, pop, mean, ys) - cost.d_mmp_term(xj, pop, mean, mean);
                acc.axpy(wj, &moved, 1.0);
            }
            Some(acc)
        } else {
            None
        };
        let term: Vec<DVector<f64>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let pop = Pop::new(yk, n, &base.weights, mean);
                let x = chunk(yk, i, n);
                match interaction {
                    InteractionKind::MeasureFree => DVector::zeros(n),
                    InteractionKind::MeanCoupled => {
                        let cmx = cost.d_mx_term(x, pop, ys) - cost.d_mx_term(x, pop, mean);
                        cmx + hoisted_term.as_ref().expect("mean-coupled hoisted sweep")
                    }
                    InteractionKind::General => {
                        let mut cmx = cost.d_mx_term(x, pop, ys);
                        for (l, &wl) in base.weights.iter().enumerate() {
                            let xl = chunk(yk, l, n);
                            cmx.axpy(-wl, &cost.d_mx_term(x, pop, xl), 1.0);
                        }
                        let mut inject = cost.d_mp_term(ys, pop, x);
                        for (j, &wj) in base.weights.iter().enumerate() {
                            let xj = chunk(yk, j, n);
                            inject.axpy(-wj, &cost.d_mp_term(xj, pop, x), 1.0);
                        }
                        let mut moved = DVector::zeros(n);
                        for (j, &wj) in base.weights.iter().enumerate() {
                            let xj = chunk(yk, j, n);
                            let mut inner = cost.d_mmp_term(xj, pop, x, ys);
                            for (l, &wl) in base.weights.iter().enumerate() {
                                let xl = chunk(yk, l, n);
                                inner.axpy(-wl, &cost.d_mmp_term(xj, pop, x, xl), 1.0);
                            }
                            moved.axpy(wj, &inner, 1.0);
                        }
                        cmx + inject + moved
                    }
                }
            })
            .collect();
        Ok(AnchorSources {
            xi: xi.clone(),
            anchor_dev,
            ctl,
            drv,
            term,
        })
    }
}

// ---------------------------------------------------------------------------
// Flow drivers

/// Coefficients of the first-order flows. The ensemble-shift system has
/// per-particle initial directions and no anchor; the mass-injection
/// system starts from zero and carries anchor sources.
struct FirstOrderDriver<'a> {
    kind: FlowKind,
    n: usize,
    d: usize,
    noise: usize,
    hess: &'a HessianStacks,
    coupling: &'a CouplingStacks,
    initial: Vec<f64>,
    anchor: Option<&'a AnchorSources>,
}

impl AffineFlowDriver for FirstOrderDriver<'_> {
    fn kind(&self) -> FlowKind {
        self.kind
    }

    fn anchor(&self) -> Option<DVector<f64>> {
        self.anchor.map(|a| a.xi.clone())
    }

    fn initial(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(chunk(&self.initial, i, self.n))
    }

    fn control_variation(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let (n, d, noise) = (self.n, self.d, self.noise);
        let mut rhs = DVector::zeros(d);
        acc_mtv(&mut rhs, &frame.coeffs.f3, chunk(frame.dp, i, n));
        for j in 0..noise {
            acc_mtv(&mut rhs, &frame.coeffs.sig3[j], q_col(frame.dq, i, j, n, noise));
        }
        acc_mtv(&mut rhs, &self.hess.hxv[frame.k][i], chunk(frame.dy, i, n));
        self.coupling
            .add_mvp_receive(frame.k, i, frame.dy, frame.dy_avg, frame.weights, n, &mut rhs);
        if let Some(a) = self.anchor {
            rhs += &a.ctl[frame.k][i];
        }
        Ok(-self.hess.hvv[frame.k][i].solve(&rhs))
    }

    fn forward_drift(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let n = self.n;
        let mut out = DVector::zeros(n);
        acc_mv(&mut out, &frame.coeffs.f1, chunk(frame.dy, i, n));
        acc_mv(&mut out, &frame.coeffs.f3, chunk(frame.dv, i, self.d));
        match self.anchor {
            None => acc_mv(&mut out, &frame.coeffs.f2, frame.dy_avg),
            Some(a) => {
                let mut mshift = a.anchor_dev[frame.k].clone();
                for (c, &avg) in frame.dy_avg.iter().enumerate() {
                    mshift[c] += avg;
                }
                acc_mv(&mut out, &frame.coeffs.f2, mshift.as_slice());
            }
        }
        Ok(out)
    }

    fn forward_diffusion(&self, frame: &FlowFrame<'_>, i: usize, j: usize) -> Result<DVector<f64>> {
        let n = self.n;
        let mut out = DVector::zeros(n);
        acc_mv(&mut out, &frame.coeffs.sig1[j], chunk(frame.dy, i, n));
        acc_mv(&mut out, &frame.coeffs.sig3[j], chunk(frame.dv, i, self.d));
        match self.anchor {
            None => acc_mv(&mut out, &frame.coeffs.sig2[j], frame.dy_avg),
            Some(a) => {
                let mut mshift = a.anchor_dev[frame.k].clone();
                for (c, &avg) in frame.dy_avg.iter().enumerate() {
                    mshift[c] += avg;
                }
                acc_mv(&mut out, &frame.coeffs.sig2[j], mshift.as_slice());
            }
        }
        Ok(out)
    }

    fn terminal(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let n = self.n;
        let u_i = chunk(frame.dy, i, n);
        let mut out = DVector::zeros(n);
        acc_mv(&mut out, &self.hess.term_hxx[i], u_i);
        self.coupling
            .add_term_mxp_receive(i, frame.dy, frame.dy_avg, frame.weights, n, &mut out);
        self.coupling
            .add_term_mxp_donate(i, frame.dy, frame.weights, n, &mut out);
        self.coupling
            .add_term_mmpq_move(i, frame.dy, frame.dy_avg, frame.weights, n, &mut out);
        self.coupling.add_term_pp_move(i, u_i, &mut out);
        if let Some(a) = self.anchor {
            out += &a.term[i];
        }
        Ok(out)
    }

    fn backward_driver(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let (n, d, noise) = (self.n, self.d, self.noise);
        let k = frame.k;
        let u_i = chunk(frame.dy, i, n);
        let dv_i = chunk(frame.dv, i, d);
        let mut out = DVector::zeros(n);
        acc_mtv(&mut out, &frame.coeffs.f1, chunk(frame.dp, i, n));
        for j in 0..noise {
            acc_mtv(&mut out, &frame.coeffs.sig1[j], q_col(frame.dq, i, j, n, noise));
        }
        acc_mv(&mut out, &self.hess.hxx[k][i], u_i);
        acc_mv(&mut out, &self.hess.hxv[k][i], dv_i);
        // Flow averages of the costate fields through the dynamics' mean
        // coupling; the anchor costate deviation is frozen in the sources.
        acc_mtv(&mut out, &frame.coeffs.f2, frame.dp_avg);
        for j in 0..noise {
            acc_mtv(&mut out, &frame.coeffs.sig2[j], &frame.dq_avg[j * n..(j + 1) * n]);
        }
        self.coupling
            .add_mxp_receive(k, i, frame.dy, frame.dy_avg, frame.weights, n, &mut out);
        self.coupling.add_mxp_donate(k, i, frame.dy, frame.weights, n, &mut out);
        self.coupling.add_mvp_donate(k, i, frame.dv, frame.weights, d, &mut out);
        self.coupling
            .add_mmpq_move(k, i, frame.dy, frame.dy_avg, frame.weights, n, &mut out);
        self.coupling.add_pp_move(k, i, u_i, &mut out);
        if let Some(a) = self.anchor {
            out += &a.drv[k][i];
        }
        Ok(out)
    }
}

/// Coefficients of one column of the per-particle state Jacobian. The
/// tagged particle carries no weight, so the ensemble terms reduce to the
/// donor-averaged probe Hessian acting on the particle's own flow state.
struct SpatialDriver<'a> {
    n: usize,
    d: usize,
    noise: usize,
    column: usize,
    hess: &'a HessianStacks,
    coupling: &'a CouplingStacks,
}

impl AffineFlowDriver for SpatialDriver<'_> {
    fn kind(&self) -> FlowKind {
        FlowKind::Spatial { column: self.column }
    }

    fn initial(&self, _i: usize) -> DVector<f64> {
        let mut e = DVector::zeros(self.n);
        e[self.column] = 1.0;
        e
    }

    fn control_variation(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let (n, d, noise) = (self.n, self.d, self.noise);
        let mut rhs = DVector::zeros(d);
        acc_mtv(&mut rhs, &frame.coeffs.f3, chunk(frame.dp, i, n));
        for j in 0..noise {
            acc_mtv(&mut rhs, &frame.coeffs.sig3[j], q_col(frame.dq, i, j, n, noise));
        }
        acc_mtv(&mut rhs, &self.hess.hxv[frame.k][i], chunk(frame.dy, i, n));
        Ok(-self.hess.hvv[frame.k][i].solve(&rhs))
    }

    fn forward_drift(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.n);
        acc_mv(&mut out, &frame.coeffs.f1, chunk(frame.dy, i, self.n));
        acc_mv(&mut out, &frame.coeffs.f3, chunk(frame.dv, i, self.d));
        Ok(out)
    }

    fn forward_diffusion(&self, frame: &FlowFrame<'_>, i: usize, j: usize) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.n);
        acc_mv(&mut out, &frame.coeffs.sig1[j], chunk(frame.dy, i, self.n));
        acc_mv(&mut out, &frame.coeffs.sig3[j], chunk(frame.dv, i, self.d));
        Ok(out)
    }

    fn terminal(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let u_i = chunk(frame.dy, i, self.n);
        let mut out = DVector::zeros(self.n);
        acc_mv(&mut out, &self.hess.term_hxx[i], u_i);
        self.coupling.add_term_pp_move(i, u_i, &mut out);
        Ok(out)
    }

    fn backward_driver(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let (n, d, noise) = (self.n, self.d, self.noise);
        let u_i = chunk(frame.dy, i, n);
        let mut out = DVector::zeros(n);
        acc_mtv(&mut out, &frame.coeffs.f1, chunk(frame.dp, i, n));
        for j in 0..noise {
            acc_mtv(&mut out, &frame.coeffs.sig1[j], q_col(frame.dq, i, j, n, noise));
        }
        acc_mv(&mut out, &self.hess.hxx[frame.k][i], u_i);
        acc_mv(&mut out, &self.hess.hxv[frame.k][i], chunk(frame.dv, i, d));
        self.coupling.add_pp_move(frame.k, i, u_i, &mut out);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Second-order sources and driver

/// Flow-independent sources of the mixed second-order system, contracted
/// once from the frozen first-order solutions. Only coefficient blocks of
/// the live unknowns remain in the driver itself.
struct SecondOrderSources {
    ctl: Vec<Vec<DVector<f64>>>,
    drv: Vec<Vec<DVector<f64>>>,
    term: Vec<DVector<f64>>,
}

/// Closing control variation at the terminal knot of a solved spatial
/// column, reassembled exactly as the linear solver produced it.
fn spatial_terminal_variation(
    spec: &ProblemSpec,
    base: &FbsdeSolution,
    hess: &HessianStacks,
    sol: &LinearFlowSolution,
) -> Vec<DVector<f64>> {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    let count = base.weights.len();
    let steps = base.grid.steps;
    let coeffs = spec.dynamics.coeffs_at(base.grid.knot(steps));
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rhs = DVector::zeros(d);
            acc_mtv(&mut rhs, &coeffs.f3, sol.dp.at(steps, i));
            for j in 0..noise {
                acc_mtv(&mut rhs, &coeffs.sig3[j], q_col(sol.dq.knot_slice(steps), i, j, n, noise));
            }
            acc_mtv(&mut rhs, &hess.hxv[steps][i], sol.dy.at(steps, i));
            -hess.hvv[steps][i].solve(&rhs)
        })
        .collect()
}

/// Closing control variation at the terminal knot of the solved
/// mass-injection flow, including its anchor-centered control source.
fn measure_terminal_variation(
    spec: &ProblemSpec,
    base: &FbsdeSolution,
    hess: &HessianStacks,
    coupling: &CouplingStacks,
    path: &AnchorPath,
    term_v: &[f64],
    sol: &LinearFlowSolution,
) -> Vec<DVector<f64>> {
    let n = spec.state_dim();
    let d = spec.control_dim();
    let noise = spec.noise_dim();
    let count = base.weights.len();
    let steps = base.grid.steps;
    let s = base.grid.knot(steps);
    let coeffs = spec.dynamics.coeffs_at(s);
    let cost = &*spec.cost;
    let interaction = cost.interaction();
    let yk = base.y.knot_slice(steps);
    let mean = base.means[steps].as_slice();
    let ys = path.y[steps].as_slice();
    let dy_avg = sol.dy.weighted_mean(steps, &base.weights);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let pop = Pop::new(yk, n, &base.weights, mean);
            let x = chunk(yk, i, n);
            let v = control_at(base, term_v, steps, i, d);
            let mut rhs = match interaction {
                InteractionKind::MeasureFree => DVector::zeros(d),
                InteractionKind::MeanCoupled => {
                    cost.d_mv(x, pop, v, s, ys) - cost.d_mv(x, pop, v, s, mean)
                }
                InteractionKind::General => {
                    let mut cmv = cost.d_mv(x, pop, v, s, ys);
                    for (l, &wl) in base.weights.iter().enumerate() {
                        let xl = chunk(yk, l, n);
                        cmv.axpy(-wl, &cost.d_mv(x, pop, v, s, xl), 1.0);
                    }
                    cmv
                }
            };
            acc_mtv(&mut rhs, &coeffs.f3, sol.dp.at(steps, i));
            for j in 0..noise {
                acc_mtv(&mut rhs, &coeffs.sig3[j], q_col(sol.dq.knot_slice(steps), i, j, n, noise));
            }
            acc_mtv(&mut rhs, &hess.hxv[steps][i], sol.dy.at(steps, i));
            coupling.add_mvp_receive(
                steps,
                i,
                sol.dy.knot_slice(steps),
                dy_avg.as_slice(),
                &base.weights,
                n,
                &mut rhs,
            );
            -hess.hvv[steps][i].solve(&rhs)
        })
        .collect()
}

impl SecondOrderSources {
    #[allow(clippy::too_many_arguments)]
    fn build(
        spec: &ProblemSpec,
        base: &FbsdeSolution,
        term_v: &[f64],
        hess: &HessianStacks,
        coupling: &CouplingStacks,
        path: &AnchorPath,
        measure: &LinearFlowSolution,
        spatial: &LinearFlowSolution,
    ) -> Result<Self> {
        let n = spec.state_dim();
        let d = spec.control_dim();
        let count = base.weights.len();
        let steps = base.grid.steps;
        let cost = &*spec.cost;
        let interaction = cost.interaction();
        let m_term_dv = measure_terminal_variation(spec, base, hess, coupling, path, term_v, measure);
        let s_term_dv = spatial_terminal_variation(spec, base, hess, spatial);
        let mut ctl = Vec::with_capacity(steps + 1);
        let mut drv = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let s = base.grid.knot(k);
            let yk = base.y.knot_slice(k);
            let mean = base.means[k].as_slice();
            let ys = path.y[k].as_slice();
            let vs = path.v[k].as_slice();
            let avg_u = measure.dy.weighted_mean(k, &base.weights);
            let rows: Vec<(DVector<f64>, DVector<f64>)> = (0..count)
                .into_par_iter()
                .map(|i| {
                    let pop = Pop::new(yk, n, &base.weights, mean);
                    let x = chunk(yk, i, n);
                    let v = control_at(base, term_v, k, i, d);
                    let u_i = DVector::from_column_slice(measure.dy.at(k, i));
                    let dv_i = if k < steps {
                        DVector::from_column_slice(measure.dv.at(k, i))
                    } else {
                        m_term_dv[i].clone()
                    };
                    let s_i = DVector::from_column_slice(spatial.dy.at(k, i));
                    let sv_i = if k < steps {
                        DVector::from_column_slice(spatial.dv.at(k, i))
                    } else {
                        s_term_dv[i].clone()
                    };
                    let t_xxx = cost.d_xxx(x, pop, v, s);
                    let t_xxv = cost.d_xxv(x, pop, v, s);
                    let t_xvv = cost.d_xvv(x, pop, v, s);
                    let t_vvv = cost.d_vvv(x, pop, v, s);
                    // Measure variations of the second-derivative blocks:
                    // anchor-centered injection plus first-order flow
                    // movement of the donor atoms.
                    let (axx, axv, avv) = match interaction {
                        InteractionKind::MeasureFree => (
                            DMatrix::zeros(n, n),
                            DMatrix::zeros(n, d),
                            DMatrix::zeros(d, d),
                        ),
                        InteractionKind::MeanCoupled => {
                            let axx = cost.d_mxx(x, pop, v, s, ys) - cost.d_mxx(x, pop, v, s, mean)
                                + cost.d_mxxp(x, pop, v, s, mean).contract_2(&avg_u);
                            let axv = cost.d_mxv(x, pop, v, s, ys) - cost.d_mxv(x, pop, v, s, mean)
                                + cost.d_mxvp(x, pop, v, s, mean).contract_2(&avg_u);
                            let avv = cost.d_mvv(x, pop, v, s, ys) - cost.d_mvv(x, pop, v, s, mean)
                                + cost.d_mvvp(x, pop, v, s, mean).contract_2(&avg_u);
                            (axx, axv, avv)
                        }
                        InteractionKind::General => {
                            let mut axx = cost.d_mxx(x, pop, v, s, ys);
                            let mut axv = cost.d_mxv(x, pop, v, s, ys);
                            let mut avv = cost.d_mvv(x, pop, v, s, ys);
                            for (l, &wl) in base.weights.iter().enumerate() {
                                let xl = chunk(yk, l, n);
                                let u_l = DVector::from_column_slice(measure.dy.at(k, l));
                                axx -= cost.d_mxx(x, pop, v, s, xl) * wl;
                                axv -= cost.d_mxv(x, pop, v, s, xl) * wl;
                                avv -= cost.d_mvv(x, pop, v, s, xl) * wl;
                                axx += cost.d_mxxp(x, pop, v, s, xl).contract_2(&u_l) * wl;
                                axv += cost.d_mxvp(x, pop, v, s, xl).contract_2(&u_l) * wl;
                                avv += cost.d_mvvp(x, pop, v, s, xl).contract_2(&u_l) * wl;
                            }
                            (axx, axv, avv)
                        }
                    };
                    // Coefficient variations of the control fixed point.
                    let mut da = t_xvv.contract_1(&u_i);
                    da += t_vvv.contract_0(&dv_i);
                    da += &avv;
                    let mut dxv = t_xxv.contract_1(&u_i).transpose();
                    dxv += t_xvv.contract_0(&dv_i);
                    dxv += &axv;
                    let mut ctl_i = DVector::zeros(d);
                    acc_mv(&mut ctl_i, &da, sv_i.as_slice());
                    acc_mtv(&mut ctl_i, &dxv, s_i.as_slice());
                    // Costate-driver sources: variations of every frozen
                    // coefficient of the spatial system, applied to the
                    // spatial solution.
                    let mut drv_i = DVector::zeros(n);
                    acc_mv(&mut drv_i, &t_xxx.contract_0(&u_i), s_i.as_slice());
                    acc_mv(&mut drv_i, &axx, s_i.as_slice());
                    acc_mv(&mut drv_i, &t_xxv.contract_0(&dv_i), s_i.as_slice());
                    acc_mv(&mut drv_i, &axv, sv_i.as_slice());
                    acc_mtv(&mut drv_i, &t_xxv.contract_0(&sv_i), u_i.as_slice());
                    acc_mv(&mut drv_i, &t_xvv.contract_0(&dv_i), sv_i.as_slice());
                    if interaction == InteractionKind::General {
                        // Variation of the donor-averaged probe Hessian.
                        let mut block = DMatrix::zeros(n, n);
                        for (j, &wj) in base.weights.iter().enumerate() {
                            let xj = chunk(yk, j, n);
                            let vj = control_at(base, term_v, k, j, d);
                            let u_j = DVector::from_column_slice(measure.dy.at(k, j));
                            let dv_j = if k < steps {
                                DVector::from_column_slice(measure.dv.at(k, j))
                            } else {
                                m_term_dv[j].clone()
                            };
                            let mut inner = cost.d_mxpp(xj, pop, vj, s, x).contract_0(&u_j);
                            inner += cost.d_mmpp(xj, pop, vj, s, x, ys);
                            for (l, &wl) in base.weights.iter().enumerate() {
                                let xl = chunk(yk, l, n);
                                let u_l = DVector::from_column_slice(measure.dy.at(k, l));
                                inner -= cost.d_mmpp(xj, pop, vj, s, x, xl) * wl;
                                inner += cost.d_mmppq(xj, pop, vj, s, x, xl).contract_2(&u_l) * wl;
                            }
                            inner += cost.d_mvpp(xj, pop, vj, s, x).contract_0(&dv_j);
                            inner += cost.d_mppp(xj, pop, vj, s, x).contract_0(&u_i);
                            block += inner * wj;
                        }
                        block += cost.d_mpp(ys, pop, vs, s, x);
                        block -= coupling.pp_sum(k, i).expect("pairwise stacks");
                        acc_mv(&mut drv_i, &block, s_i.as_slice());
                    }
                    (ctl_i, drv_i)
                })
                .collect();
            let mut crow = Vec::with_capacity(count);
            let mut drow = Vec::with_capacity(count);
            for (c, dr) in rows {
                crow.push(c);
                drow.push(dr);
            }
            ctl.push(crow);
            drv.push(drow);
        }
        let yk = base.y.knot_slice(steps);
        let mean = base.means[steps].as_slice();
        let ys = path.y[steps].as_slice();
        let avg_u = measure.dy.weighted_mean(steps, &base.weights);
        let term: Vec<DVector<f64>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let pop = Pop::new(yk, n, &base.weights, mean);
                let x = chunk(yk, i, n);
                let u_i = DVector::from_column_slice(measure.dy.at(steps, i));
                let s_i = DVector::from_column_slice(spatial.dy.at(steps, i));
                let mut t = DVector::zeros(n);
                acc_mv(&mut t, &cost.d_xxx_term(x, pop).contract_0(&u_i), s_i.as_slice());
                let axx = match interaction {
                    InteractionKind::MeasureFree => DMatrix::zeros(n, n),
                    InteractionKind::MeanCoupled => {
                        cost.d_mxx_term(x, pop, ys) - cost.d_mxx_term(x, pop, mean)
                            + cost.d_mxxp_term(x, pop, mean).contract_2(&avg_u)
                    }
                    InteractionKind::General => {
                        let mut axx = cost.d_mxx_term(x, pop, ys);
                        for (l, &wl) in base.weights.iter().enumerate() {
                            let xl = chunk(yk, l, n);
                            let u_l = DVector::from_column_slice(measure.dy.at(steps, l));
                            axx -= cost.d_mxx_term(x, pop, xl) * wl;
                            axx += cost.d_mxxp_term(x, pop, xl).contract_2(&u_l) * wl;
                        }
                        axx
                    }
                };
                acc_mv(&mut t, &axx, s_i.as_slice());
                if interaction == InteractionKind::General {
                    let mut block = DMatrix::zeros(n, n);
                    for (j, &wj) in base.weights.iter().enumerate() {
                        let xj = chunk(yk, j, n);
                        let u_j = DVector::from_column_slice(measure.dy.at(steps, j));
                        let mut inner = cost.d_mxpp_term(xj, pop, x).contract_0(&u_j);
                        inner += cost.d_mmpp_term(xj, pop, x, ys);
                        for (l, &wl) in base.weights.iter().enumerate() {
                            let xl = chunk(yk, l, n);
                            let u_l = DVector::from_column_slice(measure.dy.at(steps, l));
                            inner -= cost.d_mmpp_term(xj, pop, x, xl) * wl;
                            inner += cost.d_mmppq_term(xj, pop, x, xl).contract_2(&u_l) * wl;
                        }
                        inner += cost.d_mppp_term(xj, pop, x).contract_0(&u_i);
                        block += inner * wj;
                    }
                    block += cost.d_mpp_term(ys, pop, x);
                    block -= coupling.term_pp_sum(i).expect("pairwise stacks");
                    acc_mv(&mut t, &block, s_i.as_slice());
                }
                t
            })
            .collect();
        Ok(SecondOrderSources { ctl, drv, term })
    }
}

/// Coefficients of the mixed second-order system: the response of one
/// state-Jacobian column to the mass injection. Live terms mirror the
/// spatial system in the second-order unknowns; everything sourced by the
/// frozen first-order solutions is precomputed in [`SecondOrderSources`].
struct SecondOrderDriver<'a> {
    n: usize,
    d: usize,
    noise: usize,
    column: usize,
    xi: DVector<f64>,
    hess: &'a HessianStacks,
    coupling: &'a CouplingStacks,
    src: &'a SecondOrderSources,
}

impl AffineFlowDriver for SecondOrderDriver<'_> {
    fn kind(&self) -> FlowKind {
        FlowKind::MeasureSpatial { column: self.column }
    }

    fn anchor(&self) -> Option<DVector<f64>> {
        Some(self.xi.clone())
    }

    fn initial(&self, _i: usize) -> DVector<f64> {
        DVector::zeros(self.n)
    }

    fn control_variation(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let (n, d, noise) = (self.n, self.d, self.noise);
        let mut rhs = DVector::zeros(d);
        acc_mtv(&mut rhs, &frame.coeffs.f3, chunk(frame.dp, i, n));
        for j in 0..noise {
            acc_mtv(&mut rhs, &frame.coeffs.sig3[j], q_col(frame.dq, i, j, n, noise));
        }
        acc_mtv(&mut rhs, &self.hess.hxv[frame.k][i], chunk(frame.dy, i, n));
        rhs += &self.src.ctl[frame.k][i];
        Ok(-self.hess.hvv[frame.k][i].solve(&rhs))
    }

    fn forward_drift(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.n);
        acc_mv(&mut out, &frame.coeffs.f1, chunk(frame.dy, i, self.n));
        acc_mv(&mut out, &frame.coeffs.f3, chunk(frame.dv, i, self.d));
        Ok(out)
    }

    fn forward_diffusion(&self, frame: &FlowFrame<'_>, i: usize, j: usize) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.n);
        acc_mv(&mut out, &frame.coeffs.sig1[j], chunk(frame.dy, i, self.n));
        acc_mv(&mut out, &frame.coeffs.sig3[j], chunk(frame.dv, i, self.d));
        Ok(out)
    }

    fn terminal(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let u_i = chunk(frame.dy, i, self.n);
        let mut out = DVector::zeros(self.n);
        acc_mv(&mut out, &self.hess.term_hxx[i], u_i);
        self.coupling.add_term_pp_move(i, u_i, &mut out);
        out += &self.src.term[i];
        Ok(out)
    }

    fn backward_driver(&self, frame: &FlowFrame<'_>, i: usize) -> Result<DVector<f64>> {
        let (n, d, noise) = (self.n, self.d, self.noise);
        let u_i = chunk(frame.dy, i, n);
        let mut out = DVector::zeros(n);
        acc_mtv(&mut out, &frame.coeffs.f1, chunk(frame.dp, i, n));
        for j in 0..noise {
            acc_mtv(&mut out, &frame.coeffs.sig1[j], q_col(frame.dq, i, j, n, noise));
        }
        acc_mv(&mut out, &self.hess.hxx[frame.k][i], u_i);
        acc_mv(&mut out, &self.hess.hxv[frame.k][i], chunk(frame.dv, i, d));
        self.coupling.add_pp_move(frame.k, i, u_i, &mut out);
        out += &self.src.drv[frame.k][i];
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Public flow operations

/// Directional derivative of the solved system when every particle's
/// initial state moves along `direction`.
pub fn gateaux_flow(
    spec: &ProblemSpec,
    base: &FbsdeSolution,
    direction: &DirectionField,
    bundle: &BrownianBundle,
    opts: &SolverOptions,
) -> Result<LinearFlowSolution> {
    require_converged(base)?;
    let count = base.weights.len();
    if direction.len() != count || direction.dim() != spec.state_dim() {
        return Err(Error::dim(
            "gateaux_flow direction",
            format!("{} particles x {} dims", count, spec.state_dim()),
            format!("{} particles x {} dims", direction.len(), direction.dim()),
        ));
    }
    let term_v = terminal_controls(spec, base, &opts.control)?;
    let hess = HessianStacks::build(spec, base, &term_v)?;
    let coupling = CouplingStacks::build(spec, base, &term_v)?;
    let driver = FirstOrderDriver {
        kind: FlowKind::Gateaux,
        n: spec.state_dim(),
        d: spec.control_dim(),
        noise: spec.noise_dim(),
        hess: &hess,
        coupling: &coupling,
        initial: direction.flat().to_vec(),
        anchor: None,
    };
    solve_linear_fbsde(spec, base, &driver, bundle, opts)
}

/// State Jacobian of the solved system: one flow per state coordinate,
/// each started from the matching unit direction on every particle. The
/// tagged particle carries no weight, so no ensemble feedback enters.
pub fn spatial_jacobian(
    spec: &ProblemSpec,
    base: &FbsdeSolution,
    bundle: &BrownianBundle,
    opts: &SolverOptions,
) -> Result<Vec<LinearFlowSolution>> {
    require_converged(base)?;
    let n = spec.state_dim();
    let term_v = terminal_controls(spec, base, &opts.control)?;
    let hess = HessianStacks::build(spec, base, &term_v)?;
    // Only the donor-averaged probe Hessian survives for a weightless
    // particle, and it vanishes unless the cost is genuinely pairwise.
    let coupling = match spec.cost.interaction() {
        InteractionKind::General => CouplingStacks::build(spec, base, &term_v)?,
        _ => CouplingStacks::None,
    };
    (0..n)
        .map(|column| {
            let driver = SpatialDriver {
                n,
                d: spec.control_dim(),
                noise: spec.noise_dim(),
                column,
                hess: &hess,
                coupling: &coupling,
            };
            solve_linear_fbsde(spec, base, &driver, bundle, opts)
        })
        .collect()
}

/// Derivative of the solved system when mass `eps` moves from the
/// ensemble onto an atom at `xi`, per unit `eps`. The flow responds to
/// the signed measure `delta_xi - m`, so its ensemble average reports the
/// change of mean-field statistics and single-particle responses read off
/// against it.
pub fn measure_flow(
    spec: &ProblemSpec,
    base: &FbsdeSolution,
    xi: &DVector<f64>,
    bundle: &BrownianBundle,
    opts: &SolverOptions,
) -> Result<LinearFlowSolution> {
    require_converged(base)?;
    let n = spec.state_dim();
    if xi.len() != n {
        return Err(Error::dim("measure_flow anchor", format!("{n}"), format!("{}", xi.len())));
    }
    let count = base.weights.len();
    let term_v = terminal_controls(spec, base, &opts.control)?;
    let hess = HessianStacks::build(spec, base, &term_v)?;
    let coupling = CouplingStacks::build(spec, base, &term_v)?;
    let anchor = AnchorSources::build(spec, base, &term_v, xi, &opts.control)?;
    let driver = FirstOrderDriver {
        kind: FlowKind::Measure,
        n,
        d: spec.control_dim(),
        noise: spec.noise_dim(),
        hess: &hess,
        coupling: &coupling,
        initial: vec![0.0; count * n],
        anchor: Some(&anchor),
    };
    solve_linear_fbsde(spec, base, &driver, bundle, opts)
}

/// Mixed second-order response: the derivative of each state-Jacobian
/// column under the mass injection the measure flow linearizes. Consumes
/// the already-solved spatial columns and measure flow of the same base;
/// their fields are frozen sources here.
pub fn measure_spatial_flow(
    spec: &ProblemSpec,
    base: &FbsdeSolution,
    spatial: &[LinearFlowSolution],
    measure: &LinearFlowSolution,
    bundle: &BrownianBundle,
    opts: &SolverOptions,
) -> Result<Vec<LinearFlowSolution>> {
    require_converged(base)?;
    let n = spec.state_dim();
    let count = base.weights.len();
    let steps = base.grid.steps;
    if measure.kind != FlowKind::Measure {
        return Err(Error::InvalidArgument {
            context: "measure_spatial_flow",
            detail: format!("expected a measure flow, got {:?}", measure.kind),
        });
    }
    let xi = measure.anchor.clone().ok_or(Error::InvalidArgument {
        context: "measure_spatial_flow",
        detail: "measure flow carries no anchor point".into(),
    })?;
    if spatial.len() != n {
        return Err(Error::dim(
            "measure_spatial_flow spatial columns",
            format!("{n}"),
            format!("{}", spatial.len()),
        ));
    }
    for (c, col) in spatial.iter().enumerate() {
        if col.kind != (FlowKind::Spatial { column: c }) {
            return Err(Error::InvalidArgument {
                context: "measure_spatial_flow",
                detail: format!("spatial slot {c} holds {:?}", col.kind),
            });
        }
    }
    for sol in spatial.iter().chain(std::iter::once(measure)) {
        if sol.grid != base.grid {
            return Err(Error::InvalidArgument {
                context: "measure_spatial_flow",
                detail: "input flow solved on a different grid than the base".into(),
            });
        }
        if sol.dy.particles() != count || sol.dy.knots() != steps + 1 {
            return Err(Error::dim(
                "measure_spatial_flow input fields",
                format!("{} particles x {} knots", count, steps + 1),
                format!("{} particles x {} knots", sol.dy.particles(), sol.dy.knots()),
            ));
        }
    }
    let term_v = terminal_controls(spec, base, &opts.control)?;
    let hess = HessianStacks::build(spec, base, &term_v)?;
    let coupling = CouplingStacks::build(spec, base, &term_v)?;
    let path = simulate_anchor(spec, base, &xi, &opts.control)?;
    spatial
        .iter()
        .enumerate()
        .map(|(column, col)| {
            let src =
                SecondOrderSources::build(spec, base, &term_v, &hess, &coupling, &path, measure, col)?;
            let driver = SecondOrderDriver {
                n,
                d: spec.control_dim(),
                noise: spec.noise_dim(),
                column,
                xi: xi.clone(),
                hess: &hess,
                coupling: &coupling,
                src: &src,
            };
            solve_linear_fbsde(spec, base, &driver, bundle, opts)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Difference-quotient validation

/// What the difference quotients perturb.
pub enum FlowProbe<'a> {
    /// Shift every particle's initial state along the field and re-solve
    /// on the same noise.
    Direction(&'a DirectionField),
    /// Move mass onto an atom at the point and re-solve the mixture on
    /// the same noise, the atom riding the stream the anchor simulation
    /// uses.
    Anchor(&'a DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct FdConvergencePoint {
    pub eps: f64,
    /// Sup over knots of the weighted RMS distance between the
    /// difference quotient and the flow, maximized over the state and
    /// costate fields.
    pub sup_rms: f64,
}

#[derive(Debug, Clone)]
pub struct FdConvergenceReport {
    pub kind: FlowKind,
    pub points: Vec<FdConvergencePoint>,
    /// Least-squares slope of `ln` error against `ln` epsilon; zero when
    /// fewer than two points are given.
    pub slope: f64,
}

/// Sup-knot weighted RMS distance between the difference quotient of two
/// solves and a flow, over the first `limit` particles and measured with
/// the base weights.
fn quotient_distance(
    base: &FbsdeSolution,
    pert: &FbsdeSolution,
    eps: f64,
    flow: &LinearFlowSolution,
    limit: usize,
) -> f64 {
    let n = base.y.dim();
    let steps = base.grid.steps;
    let mut worst = 0.0f64;
    for k in 0..=steps {
        let mut acc_y = 0.0;
        let mut acc_p = 0.0;
        for i in 0..limit {
            let wi = base.weights[i];
            let by = base.y.at(k, i);
            let py = pert.y.at(k, i);
            let bp = base.p.at(k, i);
            let pp = pert.p.at(k, i);
            let fy = flow.dy.at(k, i);
            let fp = flow.dp.at(k, i);
            for a in 0..n {
                let qy = (py[a] - by[a]) / eps - fy[a];
                acc_y += wi * qy * qy;
                let qp = (pp[a] - bp[a]) / eps - fp[a];
                acc_p += wi * qp * qp;
            }
        }
        worst = worst.max(acc_y.sqrt()).max(acc_p.sqrt());
    }
    worst
}

fn lnln_slope(points: &[FdConvergencePoint]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.eps.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.sup_rms.max(1e-300).ln()).collect();
    let xm = xs.iter().sum::<f64>() / xs.len() as f64;
    let ym = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - xm) * (y - ym);
        den += (x - xm) * (x - xm);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Solves the base system, the flow the probe linearizes, and one
/// perturbed re-solve per epsilon on common random numbers, and reports
/// the distance between difference quotients and the flow at each
/// epsilon together with the log-log slope.
///
/// Direction probes validate [`gateaux_flow`]; anchor probes validate
/// [`measure_flow`] by re-solving the Dirac mixture with the anchor
/// appended as the final atom, comparing over the original particles.
pub fn fd_convergence_check(
    spec: &ProblemSpec,
    ensemble: &ParticleEnsemble,
    grid: &TimeGrid,
    probe: FlowProbe<'_>,
    eps_list: &[f64],
    opts: &SolverOptions,
) -> Result<FdConvergenceReport> {
    if eps_list.is_empty() || eps_list.iter().any(|&e| !(e > 0.0 && e < 1.0) || !e.is_finite()) {
        return Err(Error::InvalidArgument {
            context: "fd_convergence_check",
            detail: format!("epsilon list must be finite in (0, 1), got {eps_list:?}"),
        });
    }
    let count = ensemble.len();
    let noise = spec.noise_dim();
    let bundle = BrownianBundle::sample(count, grid, noise, opts.seed, StreamPurpose::Brownian);
    let base = continuation_solve(spec, ensemble, grid, &bundle, opts)?;
    let mut points = Vec::with_capacity(eps_list.len());
    let kind;
    match probe {
        FlowProbe::Direction(dir) => {
            let flow = gateaux_flow(spec, &base, dir, &bundle, opts)?;
            kind = flow.kind;
            for &eps in eps_list {
                let mut states = ensemble.states_matrix();
                for i in 0..count {
                    let at = dir.atom(i);
                    for (c, &dc) in at.iter().enumerate() {
                        states[(i, c)] += eps * dc;
                    }
                }
                let shifted = ParticleEnsemble::new(
                    &states,
                    ensemble.weights().to_vec(),
                    ensemble.generation_seed(),
                )?;
                let pert = continuation_solve(spec, &shifted, grid, &bundle, opts)?;
                let sup_rms = quotient_distance(&base, &pert, eps, &flow, count);
                points.push(FdConvergencePoint { eps, sup_rms });
            }
        }
        FlowProbe::Anchor(xi) => {
            let flow = measure_flow(spec, &base, xi, &bundle, opts)?;
            kind = flow.kind;
            let ext =
                BrownianBundle::sample(count + 1, grid, noise, opts.seed, StreamPurpose::Brownian);
            for &eps in eps_list {
                let mix = ensemble.perturb_dirac(xi, eps)?;
                let pert = continuation_solve(spec, &mix.ensemble, grid, &ext, opts)?;
                let sup_rms = quotient_distance(&base, &pert, eps, &flow, count);
                points.push(FdConvergencePoint { eps, sup_rms });
            }
        }
    }
    let slope = lnln_slope(&points);
    Ok(FdConvergenceReport { kind, points, slope })
}
