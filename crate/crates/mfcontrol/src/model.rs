//! Problem specification: dynamics, costs, their derivatives, and
//! assumption checks.
//!
//! The solver targets controlled dynamics that are linear in state, mean
//! and control,
//!
//! ```text
//! dx = [f0(s) + f1(s) x + f2(s) xbar + f3(s) v] ds
//!      + sum_j [sigma0_j(s) + sigma1_j(s) x + sigma2_j(s) xbar + sigma3_j(s) v] dw_j,
//! ```
//!
//! where `xbar` is the mean of the current state distribution and the noise
//! has one column per state component. Costs are general functions of
//! `(x, m, v, s)`; their dependence on the measure `m` enters through a
//! particle ensemble view ([`Pop`]).
//!
//! Derivatives of the cost with respect to the measure are linear
//! functional derivatives: `d_m(x, m, v, s)(probe)` is a function of the
//! probe point whose integral against a signed measure of total mass zero
//! gives the directional derivative. Such derivatives are defined only up
//! to an additive constant in the probe; see the note on [`CostModel`] for
//! the convention the finite-difference fallbacks produce.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Tensor3;
use crate::measure::Pop;
use crate::paths::{derive_seed, StreamPurpose};

/// Relative step used by all finite-difference fallbacks: the step for a
/// coordinate of magnitude `z` is `FD_STEP * (1 + |z|)`.
pub const FD_STEP: f64 = 1e-5;

/// Mixture weight pair used by measure-derivative fallbacks; the two
/// quotients are extrapolated linearly to zero weight.
pub const FD_MIX_EPS: (f64, f64) = (2e-4, 1e-4);

/// Coefficient blocks of the linear dynamics at one time.
#[derive(Debug, Clone)]
pub struct DynCoeffs {
    pub f0: DVector<f64>,
    pub f1: DMatrix<f64>,
    pub f2: DMatrix<f64>,
    pub f3: DMatrix<f64>,
    /// Per noise column `j`: constant, state, mean and control blocks.
    pub sig0: Vec<DVector<f64>>,
    pub sig1: Vec<DMatrix<f64>>,
    pub sig2: Vec<DMatrix<f64>>,
    pub sig3: Vec<DMatrix<f64>>,
}

impl DynCoeffs {
    /// All-zero coefficients for state dimension `n` and control dimension `d`.
    pub fn zeros(n: usize, d: usize) -> Self {
        DynCoeffs {
            f0: DVector::zeros(n),
            f1: DMatrix::zeros(n, n),
            f2: DMatrix::zeros(n, n),
            f3: DMatrix::zeros(n, d),
            sig0: vec![DVector::zeros(n); n],
            sig1: vec![DMatrix::zeros(n, n); n],
            sig2: vec![DMatrix::zeros(n, n); n],
            sig3: vec![DMatrix::zeros(n, d); n],
        }
    }

    pub fn check_dims(&self, n: usize, d: usize) -> Result<()> {
        let want = |ok: bool, what: &'static str, got: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::dim(what, format!("state {n}, control {d}"), got))
            }
        };
        want(self.f0.len() == n, "DynCoeffs.f0", format!("{}", self.f0.len()))?;
        want(
            self.f1.shape() == (n, n),
            "DynCoeffs.f1",
            format!("{:?}", self.f1.shape()),
        )?;
        want(
            self.f2.shape() == (n, n),
            "DynCoeffs.f2",
            format!("{:?}", self.f2.shape()),
        )?;
        want(
            self.f3.shape() == (n, d),
            "DynCoeffs.f3",
            format!("{:?}", self.f3.shape()),
        )?;
        for (label, len, ok) in [
            ("DynCoeffs.sig0", self.sig0.len(), self.sig0.iter().all(|c| c.len() == n)),
            ("DynCoeffs.sig1", self.sig1.len(), self.sig1.iter().all(|c| c.shape() == (n, n))),
            ("DynCoeffs.sig2", self.sig2.len(), self.sig2.iter().all(|c| c.shape() == (n, n))),
            ("DynCoeffs.sig3", self.sig3.len(), self.sig3.iter().all(|c| c.shape() == (n, d))),
        ] {
            want(len == n && ok, label, format!("{len} columns"))?;
        }
        Ok(())
    }

    /// Largest operator/Euclidean norm over all blocks (used by the
    /// coefficient-bound check).
    pub fn max_block_norm(&self) -> f64 {
        let mut m = self.f0.norm().max(self.f1.norm()).max(self.f2.norm()).max(self.f3.norm());
        for j in 0..self.sig0.len() {
            m = m
                .max(self.sig0[j].norm())
                .max(self.sig1[j].norm())
                .max(self.sig2[j].norm())
                .max(self.sig3[j].norm());
        }
        m
    }

    /// Largest norm over the control blocks of the diffusion.
    pub fn sigma_control_norm(&self) -> f64 {
        self.sig3.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

/// Linear-in-(state, mean, control) dynamics with time-dependent
/// coefficients, supplied as a callback evaluated at grid times.
pub struct LinearDynamics {
    state_dim: usize,
    control_dim: usize,
    coeffs: Box<dyn Fn(f64) -> DynCoeffs + Send + Sync>,
    /// Claimed uniform bound on all coefficient norms (checked on samples).
    pub bound: f64,
}

impl std::fmt::Debug for LinearDynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearDynamics")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("bound", &self.bound)
            .finish()
    }
}

impl LinearDynamics {
    pub fn time_varying(
        state_dim: usize,
        control_dim: usize,
        bound: f64,
        coeffs: impl Fn(f64) -> DynCoeffs + Send + Sync + 'static,
    ) -> Self {
        LinearDynamics {
            state_dim,
            control_dim,
            coeffs: Box::new(coeffs),
            bound,
        }
    }

    /// Dynamics with time-independent coefficient blocks.
    pub fn constant(coeffs: DynCoeffs, bound: f64) -> Result<Self> {
        let n = coeffs.f0.len();
        let d = coeffs.f3.ncols();
        coeffs.check_dims(n, d)?;
        Ok(LinearDynamics {
            state_dim: n,
            control_dim: d,
            coeffs: Box::new(move |_| coeffs.clone()),
            bound,
        })
    }

    #[inline]
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    #[inline]
    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Noise dimension equals the state dimension.
    #[inline]
    pub fn noise_dim(&self) -> usize {
        self.state_dim
    }

    pub fn coeffs_at(&self, s: f64) -> DynCoeffs {
        (self.coeffs)(s)
    }
}

/// How a cost depends on the measure argument. Drivers exploit this to
/// collapse nested ensemble averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionKind {
    /// Cost ignores the measure entirely.
    MeasureFree,
    /// Cost depends on the measure only through its mean, and every
    /// first-order measure derivative is affine in the probe point with
    /// probe-independent coefficients.
    MeanCoupled,
    /// No structure assumed; drivers fall back to full pairwise loops.
    General,
}

/// Running and terminal cost with the derivative callbacks the solver
/// layers consume.
///
/// Only `g`, `g_term`, the dimensions and the convexity modulus are
/// abstract; every derivative has a finite-difference default (central in
/// point arguments with step `FD_STEP * (1 + |coordinate|)`, Dirac-mixture
/// quotients extrapolated over `FD_MIX_EPS` in the measure). Implementors
/// should override with analytic expressions where available; the defaults
/// exist so partial models remain usable and so analytic overrides can be
/// cross-checked.
///
/// Measure derivatives are defined up to an additive constant per probe
/// argument. The mixture-quotient defaults produce the representative
/// centered against the base measure (its mean under `m` is zero); analytic
/// overrides may use any representative. All solver observables are built
/// from combinations that do not see the representative choice (probe
/// differences, probe gradients, and integrals against mass-zero signed
/// measures), so mixing conventions between overridden and defaulted
/// callbacks is sound.
///
/// Matrix and tensor orientations follow the accessor name: each letter
/// after `d_` contributes one axis in order (`x` state, `v` control, `p`
/// probe, and for second functional derivatives `q` the second probe), so
/// for instance `d_mxp[(a, b)] = d^2 (dg/dnu)(..)(p) / dx_a dp_b`.
#[allow(unused_variables)]
pub trait CostModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Strong-convexity modulus in the control slot: the claimed largest
    /// `lambda` with `g(v') - g(v) - D_v g . (v' - v) >= lambda |v' - v|^2`.
    fn lambda(&self) -> f64;

    fn interaction(&self) -> InteractionKind {
        InteractionKind::General
    }

    /// Running cost.
    fn g(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> f64;

    /// Terminal cost.
    fn g_term(&self, x: &[f64], m: Pop) -> f64;

    // First order -----------------------------------------------------------

    fn d_x(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> DVector<f64> {
        fd_grad(x, |z| self.g(z, m, v, s))
    }

    fn d_v(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> DVector<f64> {
        fd_grad(v, |z| self.g(x, m, z, s))
    }

    fn d_x_term(&self, x: &[f64], m: Pop) -> DVector<f64> {
        fd_grad(x, |z| self.g_term(z, m))
    }

    /// Linear functional derivative of `g` in the measure, evaluated at a
    /// probe point.
    fn d_m(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> f64 {
        fd_mixture(m, p, |mix| self.g(x, mix, v, s))
    }

    fn d_m_term(&self, x: &[f64], m: Pop, p: &[f64]) -> f64 {
        fd_mixture(m, p, |mix| self.g_term(x, mix))
    }

    /// Probe gradient of `d_m` (independent of the representative).
    fn d_mp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> DVector<f64> {
        fd_grad(p, |z| self.d_m(x, m, v, s, z))
    }

    fn d_mp_term(&self, x: &[f64], m: Pop, p: &[f64]) -> DVector<f64> {
        fd_grad(p, |z| self.d_m_term(x, m, z))
    }

    // Second order ----------------------------------------------------------

    fn d_xx(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> DMatrix<f64> {
        fd_jacobian(x, self.state_dim(), |z| self.d_x(z, m, v, s)).transpose()
    }

    /// Mixed state/control second derivative, rows indexed by `x`.
    fn d_xv(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> DMatrix<f64> {
        fd_jacobian(v, self.state_dim(), |z| self.d_x(x, m, z, s))
    }

    fn d_vv(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> DMatrix<f64> {
        let h = fd_jacobian(v, self.control_dim(), |z| self.d_v(x, m, z, s));
        symmetrize(h)
    }

    fn d_xx_term(&self, x: &[f64], m: Pop) -> DMatrix<f64> {
        let h = fd_jacobian(x, self.state_dim(), |z| self.d_x_term(z, m));
        symmetrize(h)
    }

    /// State gradient of `d_m` (representative-dependent; consumed only in
    /// representative-free combinations).
    fn d_mx(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> DVector<f64> {
        fd_grad(x, |z| self.d_m(z, m, v, s, p))
    }

    fn d_mx_term(&self, x: &[f64], m: Pop, p: &[f64]) -> DVector<f64> {
        fd_grad(x, |z| self.d_m_term(z, m, p))
    }

    fn d_mv(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> DVector<f64> {
        fd_grad(v, |z| self.d_m(x, m, z, s, p))
    }

    fn d_mxp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> DMatrix<f64> {
        fd_jacobian(x, self.state_dim(), |z| self.d_mp(z, m, v, s, p)).transpose()
    }

    fn d_mxp_term(&self, x: &[f64], m: Pop, p: &[f64]) -> DMatrix<f64> {
        fd_jacobian(x, self.state_dim(), |z| self.d_mp_term(z, m, p)).transpose()
    }

    fn d_mvp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> DMatrix<f64> {
        fd_jacobian(v, self.state_dim(), |z| self.d_mp(x, m, z, s, p)).transpose()
    }

    fn d_mpp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> DMatrix<f64> {
        let h = fd_jacobian(p, self.state_dim(), |z| self.d_mp(x, m, v, s, z));
        symmetrize(h)
    }

    fn d_mpp_term(&self, x: &[f64], m: Pop, p: &[f64]) -> DMatrix<f64> {
        let h = fd_jacobian(p, self.state_dim(), |z| self.d_mp_term(x, m, z));
        symmetrize(h)
    }

    /// Second functional derivative at a probe pair.
    fn d_mm(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64], q: &[f64]) -> f64 {
        fd_mixture(m, q, |mix| self.d_m(x, mix, v, s, p))
    }

    fn d_mm_term(&self, x: &[f64], m: Pop, p: &[f64], q: &[f64]) -> f64 {
        fd_mixture(m, q, |mix| self.d_m_term(x, mix, p))
    }

    /// First-probe gradient of `d_mm`.
    fn d_mmp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64], q: &[f64]) -> DVector<f64> {
        fd_mixture_vec(m, q, self.state_dim(), |mix| self.d_mp(x, mix, v, s, p))
    }

    fn d_mmp_term(&self, x: &[f64], m: Pop, p: &[f64], q: &[f64]) -> DVector<f64> {
        fd_mixture_vec(m, q, self.state_dim(), |mix| self.d_mp_term(x, mix, p))
    }

    /// Probe-pair cross second derivative of `d_mm`, rows indexed by the
    /// first probe.
    fn d_mmpq(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64], q: &[f64]) -> DMatrix<f64> {
        fd_jacobian(q, self.state_dim(), |z| self.d_mmp(x, m, v, s, p, z))
    }

    fn d_mmpq_term(&self, x: &[f64], m: Pop, p: &[f64], q: &[f64]) -> DMatrix<f64> {
        fd_jacobian(q, self.state_dim(), |z| self.d_mmp_term(x, m, p, z))
    }

    /// First-probe Hessian of `d_mm`: axes `(p, p)` at a fixed second probe.
    fn d_mmpp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64], q: &[f64]) -> DMatrix<f64> {
        let h = fd_jacobian(p, self.state_dim(), |z| self.d_mmp(x, m, v, s, z, q));
        symmetrize(h)
    }

    fn d_mmpp_term(&self, x: &[f64], m: Pop, p: &[f64], q: &[f64]) -> DMatrix<f64> {
        let h = fd_jacobian(p, self.state_dim(), |z| self.d_mmp_term(x, m, z, q));
        symmetrize(h)
    }

    // Third order (linearized second-derivative flows) ----------------------

    fn d_xxx(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> Tensor3 {
        fd_tensor(x, |z| self.d_xx(z, m, v, s))
    }

    fn d_xxv(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> Tensor3 {
        fd_tensor(v, |z| self.d_xx(x, m, z, s))
    }

    fn d_xvv(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> Tensor3 {
        fd_tensor(v, |z| self.d_xv(x, m, z, s))
    }

    fn d_vvv(&self, x: &[f64], m: Pop, v: &[f64], s: f64) -> Tensor3 {
        fd_tensor(v, |z| self.d_vv(x, m, z, s))
    }

    fn d_xxx_term(&self, x: &[f64], m: Pop) -> Tensor3 {
        fd_tensor(x, |z| self.d_xx_term(z, m))
    }

    /// Second state derivative of `d_m`: axes `(x, x)` at a fixed probe.
    fn d_mxx(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> DMatrix<f64> {
        let h = fd_jacobian(x, self.state_dim(), |z| self.d_mx(z, m, v, s, p));
        symmetrize(h)
    }

    fn d_mxx_term(&self, x: &[f64], m: Pop, p: &[f64]) -> DMatrix<f64> {
        let h = fd_jacobian(x, self.state_dim(), |z| self.d_mx_term(z, m, p));
        symmetrize(h)
    }

    /// Mixed state/control second derivative of `d_m`: axes `(x, v)` at a
    /// fixed probe.
    fn d_mxv(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> DMatrix<f64> {
        fd_jacobian(v, self.state_dim(), |u| self.d_mx(x, m, u, s, p))
    }

    /// Second control derivative of `d_m`: axes `(v, v)` at a fixed probe.
    fn d_mvv(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> DMatrix<f64> {
        let h = fd_jacobian(v, self.control_dim(), |u| self.d_mv(x, m, u, s, p));
        symmetrize(h)
    }

    /// Axes `(x, x, p)`.
    fn d_mxxp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> Tensor3 {
        fd_tensor_last(p, |z| self.d_mxx(x, m, v, s, z))
    }

    fn d_mxxp_term(&self, x: &[f64], m: Pop, p: &[f64]) -> Tensor3 {
        fd_tensor_last(p, |z| self.d_mxx_term(x, m, z))
    }

    /// Axes `(x, v, p)`.
    fn d_mxvp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> Tensor3 {
        fd_tensor_last(p, |z| {
            fd_jacobian(v, self.state_dim(), |u| self.d_mx(x, m, u, s, z))
        })
    }

    /// Axes `(v, v, p)`.
    fn d_mvvp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> Tensor3 {
        fd_tensor_last(p, |z| {
            let h = fd_jacobian(v, self.control_dim(), |u| self.d_mv(x, m, u, s, z));
            symmetrize(h)
        })
    }

    /// Axes `(x, p, p)`.
    fn d_mxpp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> Tensor3 {
        fd_tensor(x, |z| self.d_mpp(z, m, v, s, p))
    }

    fn d_mxpp_term(&self, x: &[f64], m: Pop, p: &[f64]) -> Tensor3 {
        fd_tensor(x, |z| self.d_mpp_term(z, m, p))
    }

    /// Axes `(v, p, p)`.
    fn d_mvpp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> Tensor3 {
        fd_tensor(v, |z| self.d_mpp(x, m, z, s, p))
    }

    /// Axes `(p, p, p)`.
    fn d_mppp(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64]) -> Tensor3 {
        fd_tensor(p, |z| self.d_mpp(x, m, v, s, z))
    }

    fn d_mppp_term(&self, x: &[f64], m: Pop, p: &[f64]) -> Tensor3 {
        fd_tensor(p, |z| self.d_mpp_term(x, m, z))
    }

    /// Axes `(x, p, q)`: state gradient of `d_mmpq`.
    fn d_mmxpq(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64], q: &[f64]) -> Tensor3 {
        fd_tensor(x, |z| self.d_mmpq(z, m, v, s, p, q))
    }

    fn d_mmxpq_term(&self, x: &[f64], m: Pop, p: &[f64], q: &[f64]) -> Tensor3 {
        fd_tensor(x, |z| self.d_mmpq_term(z, m, p, q))
    }

    /// Axes `(p, p, q)`: first-probe Hessian of `d_mm` contracted with the
    /// second-probe gradient slot.
    fn d_mmppq(&self, x: &[f64], m: Pop, v: &[f64], s: f64, p: &[f64], q: &[f64]) -> Tensor3 {
        fd_tensor(p, |z| self.d_mmpq(x, m, v, s, z, q))
    }

    fn d_mmppq_term(&self, x: &[f64], m: Pop, p: &[f64], q: &[f64]) -> Tensor3 {
        fd_tensor(p, |z| self.d_mmpq_term(x, m, z, q))
    }
}

fn symmetrize(h: DMatrix<f64>) -> DMatrix<f64> {
    let ht = h.transpose();
    (h + ht) * 0.5
}

/// Central-difference gradient of a scalar function of a point argument.
fn fd_grad(z0: &[f64], f: impl Fn(&[f64]) -> f64) -> DVector<f64> {
    let mut out = DVector::zeros(z0.len());
    let mut z = z0.to_vec();
    for a in 0..z0.len() {
        let h = FD_STEP * (1.0 + z0[a].abs());
        z[a] = z0[a] + h;
        let fp = f(&z);
        z[a] = z0[a] - h;
        let fm = f(&z);
        z[a] = z0[a];
        out[a] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Central-difference Jacobian: column `a` is the derivative of `f` along
/// coordinate `a` of `z0`; the output has `rows` rows and `z0.len()` columns.
fn fd_jacobian(z0: &[f64], rows: usize, f: impl Fn(&[f64]) -> DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, z0.len());
    let mut z = z0.to_vec();
    for a in 0..z0.len() {
        let h = FD_STEP * (1.0 + z0[a].abs());
        z[a] = z0[a] + h;
        let fp = f(&z);
        z[a] = z0[a] - h;
        let fm = f(&z);
        z[a] = z0[a];
        for r in 0..rows {
            out[(r, a)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    out
}

/// Central-difference derivative of a matrix function along `z0`; axis
/// order `(matrix rows, matrix cols is differentiated-last)`: the result is
/// `(rows of f, cols of f, len of z0)` with the new axis last.
fn fd_tensor_last(z0: &[f64], f: impl Fn(&[f64]) -> DMatrix<f64>) -> Tensor3 {
    let probe = f(z0);
    let (r, c) = probe.shape();
    let mut out = Tensor3::zeros(r, c, z0.len());
    let mut z = z0.to_vec();
    for a in 0..z0.len() {
        let h = FD_STEP * (1.0 + z0[a].abs());
        z[a] = z0[a] + h;
        let fp = f(&z);
        z[a] = z0[a] - h;
        let fm = f(&z);
        z[a] = z0[a];
        for i in 0..r {
            for j in 0..c {
                out.set(i, j, a, (fp[(i, j)] - fm[(i, j)]) / (2.0 * h));
            }
        }
    }
    out
}

/// As [`fd_tensor_last`] but with the differentiated axis first:
/// `(len of z0, rows of f, cols of f)`.
fn fd_tensor(z0: &[f64], f: impl Fn(&[f64]) -> DMatrix<f64>) -> Tensor3 {
    let probe = f(z0);
    let (r, c) = probe.shape();
    let mut out = Tensor3::zeros(z0.len(), r, c);
    let mut z = z0.to_vec();
    for a in 0..z0.len() {
        let h = FD_STEP * (1.0 + z0[a].abs());
        z[a] = z0[a] + h;
        let fp = f(&z);
        z[a] = z0[a] - h;
        let fm = f(&z);
        z[a] = z0[a];
        for i in 0..r {
            for j in 0..c {
                out.set(a, i, j, (fp[(i, j)] - fm[(i, j)]) / (2.0 * h));
            }
        }
    }
    out
}

/// Dirac-mixture difference quotient for measure derivatives: evaluates
/// `f` on `(1 - eps) m + eps delta_p` for the two weights in
/// [`FD_MIX_EPS`] and extrapolates the quotients to `eps = 0`. The result
/// is the representative of the functional derivative centered against `m`.
fn fd_mixture(m: Pop<'_>, p: &[f64], f: impl Fn(Pop<'_>) -> f64) -> f64 {
    let base = f(m);
    let quotient = |eps: f64| {
        let (flat, weights, mean) = mixture_buffers(m, p, eps);
        let mixed = Pop::new(&flat, m.dim(), &weights, &mean);
        (f(mixed) - base) / eps
    };
    let (e1, e2) = FD_MIX_EPS;
    let q1 = quotient(e1);
    let q2 = quotient(e2);
    // e1 = 2 e2: linear extrapolation in eps cancels the leading bias.
    2.0 * q2 - q1
}

/// Vector version of [`fd_mixture`].
fn fd_mixture_vec(
    m: Pop<'_>,
    p: &[f64],
    dim_out: usize,
    f: impl Fn(Pop<'_>) -> DVector<f64>,
) -> DVector<f64> {
    let base = f(m);
    let quotient = |eps: f64| {
        let (flat, weights, mean) = mixture_buffers(m, p, eps);
        let mixed = Pop::new(&flat, m.dim(), &weights, &mean);
        (f(mixed) - &base) / eps
    };
    let (e1, e2) = FD_MIX_EPS;
    let q1 = quotient(e1);
    let q2 = quotient(e2);
    debug_assert_eq!(base.len(), dim_out);
    q2 * 2.0 - q1
}

fn mixture_buffers(m: Pop<'_>, p: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = m.len();
    let dim = m.dim();
    let mut flat = Vec::with_capacity((n + 1) * dim);
    for i in 0..n {
        flat.extend_from_slice(m.atom(i));
    }
    flat.extend_from_slice(p);
    let mut weights = Vec::with_capacity(n + 1);
    weights.extend(m.weights().iter().map(|w| w * (1.0 - eps)));
    weights.push(eps);
    let mean: Vec<f64> = m
        .mean()
        .iter()
        .zip(p.iter())
        .map(|(mu, pi)| (1.0 - eps) * mu + eps * pi)
        .collect();
    (flat, weights, mean)
}

/// Full problem description consumed by every solver layer.
pub struct ProblemSpec {
    pub dynamics: LinearDynamics,
    pub cost: Arc<dyn CostModel>,
    /// Terminal time; the solve interval is `[t0, horizon]` with `t0` given
    /// per call.
    pub horizon: f64,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("state_dim", &self.state_dim())
            .field("control_dim", &self.control_dim())
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl ProblemSpec {
    pub fn new(dynamics: LinearDynamics, cost: Arc<dyn CostModel>, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument {
                context: "ProblemSpec::new",
                detail: format!("horizon {horizon} must be positive"),
            });
        }
        if cost.state_dim() != dynamics.state_dim() || cost.control_dim() != dynamics.control_dim()
        {
            return Err(Error::dim(
                "ProblemSpec::new",
                format!(
                    "cost dims ({}, {})",
                    dynamics.state_dim(),
                    dynamics.control_dim()
                ),
                format!("({}, {})", cost.state_dim(), cost.control_dim()),
            ));
        }
        Ok(ProblemSpec {
            dynamics,
            cost,
            horizon,
        })
    }

    #[inline]
    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    #[inline]
    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    #[inline]
    pub fn noise_dim(&self) -> usize {
        self.dynamics.noise_dim()
    }

    /// Drift at one point: `f0 + f1 x + f2 mbar + f3 v`.
    pub fn eval_drift(
        &self,
        x: &DVector<f64>,
        mbar: &DVector<f64>,
        v: &DVector<f64>,
        s: f64,
    ) -> Result<DVector<f64>> {
        let n = self.state_dim();
        let d = self.control_dim();
        if x.len() != n || mbar.len() != n {
            return Err(Error::dim("eval_drift state", format!("{n}"), format!("{}", x.len())));
        }
        if v.len() != d {
            return Err(Error::dim("eval_drift control", format!("{d}"), format!("{}", v.len())));
        }
        let c = self.dynamics.coeffs_at(s);
        Ok(&c.f0 + &c.f1 * x + &c.f2 * mbar + &c.f3 * v)
    }

    /// Diffusion column `j` (zero-based) at one point.
    pub fn eval_diffusion_col(
        &self,
        j: usize,
        x: &DVector<f64>,
        mbar: &DVector<f64>,
        v: &DVector<f64>,
        s: f64,
    ) -> Result<DVector<f64>> {
        if j >= self.noise_dim() {
            return Err(Error::InvalidArgument {
                context: "eval_diffusion_col",
                detail: format!("column {j} out of range for noise dim {}", self.noise_dim()),
            });
        }
        let c = self.dynamics.coeffs_at(s);
        Ok(&c.sig0[j] + &c.sig1[j] * x + &c.sig2[j] * mbar + &c.sig3[j] * v)
    }
}

/// Outcome of sampling the strong-convexity gap of the running cost in the
/// control slot.
#[derive(Debug, Clone)]
pub struct ConvexityEstimate {
    /// Smallest sampled ratio of the convexity gap to `|v' - v|^2`.
    pub lambda_hat: f64,
    /// Tuple achieving it: `(x, v, v', s)`.
    pub worst: (DVector<f64>, DVector<f64>, DVector<f64>, f64),
}

/// Estimates the strong-convexity modulus of `g` in `v` by sampling
/// `sample_count` tuples `(x, m, v, v', s)` and minimizing the gap ratio
/// `(g(v') - g(v) - D_v g . (v' - v)) / |v' - v|^2`. Deterministic in
/// `seed`. Components are drawn uniformly from `[-1, 1]`.
pub fn estimate_convexity(
    spec: &ProblemSpec,
    sample_count: usize,
    seed: u64,
) -> Result<ConvexityEstimate> {
    if sample_count < 2 {
        return Err(Error::InvalidArgument {
            context: "estimate_convexity",
            detail: format!("sample_count {sample_count} < 2"),
        });
    }
    let n = spec.state_dim();
    let d = spec.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, StreamPurpose::Validation, 1));
    let draw = |len: usize, rng: &mut ChaCha8Rng| {
        DVector::from_fn(len, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
    };
    let atoms = 16;
    let mut flat = vec![0.0; atoms * n];
    for value in flat.iter_mut() {
        *value = rng.gen::<f64>() * 2.0 - 1.0;
    }
    let ensemble = crate::measure::ParticleEnsemble::from_flat(flat, n, seed)?;
    let mean = ensemble.ensemble_mean();
    let m = ensemble.pop(&mean);
    let mut best: Option<ConvexityEstimate> = None;
    for _ in 0..sample_count {
        let x = draw(n, &mut rng);
        let v = draw(d, &mut rng);
        let mut vp = draw(d, &mut rng);
        if (&vp - &v).norm_squared() < 1e-8 {
            vp[0] += 0.5;
        }
        let s = rng.gen::<f64>() * spec.horizon;
        let dv = &vp - &v;
        let gap = spec.cost.g(x.as_slice(), m, vp.as_slice(), s)
            - spec.cost.g(x.as_slice(), m, v.as_slice(), s)
            - spec.cost.d_v(x.as_slice(), m, v.as_slice(), s).dot(&dv);
        let ratio = gap / dv.norm_squared();
        if best.as_ref().map_or(true, |b| ratio < b.lambda_hat) {
            best = Some(ConvexityEstimate {
                lambda_hat: ratio,
                worst: (x, v, vp, s),
            });
        }
    }
    Ok(best.expect("sample_count >= 2"))
}

/// One assumption check inside a [`ValidationReport`].
#[derive(Debug, Clone)]
pub struct SpecCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Report produced by [`validate_spec`]; report-only, never an error.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<SpecCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&SpecCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Options for [`validate_spec`].
#[derive(Debug, Clone)]
pub struct ValidationOptions {
    /// Sampled tuples per check.
    pub samples: usize,
    pub seed: u64,
    /// Enables the control-free-diffusion check required by the Bellman and
    /// master layers.
    pub check_bellman_layer: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            samples: 200,
            seed: 0x5eed,
            check_bellman_layer: false,
        }
    }
}

/// Samples the structural assumptions of a problem: dimensional
/// consistency, the uniform coefficient bound, quadratic cost growth,
/// strong control convexity, and (when requested) control-free diffusion.
/// Pure: identical inputs give identical reports.
pub fn validate_spec(spec: &ProblemSpec, opts: &ValidationOptions) -> ValidationReport {
    let mut checks = Vec::new();
    let n = spec.state_dim();
    let d = spec.control_dim();
    let times: Vec<f64> = (0..=16)
        .map(|k| spec.horizon * k as f64 / 16.0)
        .collect();

    // Dimensions of every coefficient block at sampled times.
    let mut dim_detail = String::from("all coefficient blocks sized for (n, d)");
    let mut dim_ok = true;
    for &s in &times {
        if let Err(e) = spec.dynamics.coeffs_at(s).check_dims(n, d) {
            dim_ok = false;
            dim_detail = format!("at s = {s}: {e}");
            break;
        }
    }
    checks.push(SpecCheck {
        name: "dimensions",
        passed: dim_ok,
        detail: dim_detail,
    });

    // Uniform bound on coefficient norms.
    let max_norm = times
        .iter()
        .map(|&s| spec.dynamics.coeffs_at(s).max_block_norm())
        .fold(0.0, f64::max);
    checks.push(SpecCheck {
        name: "coefficient-bound",
        passed: max_norm <= spec.dynamics.bound + 1e-12,
        detail: format!(
            "max block norm {max_norm:.6} vs declared bound {}",
            spec.dynamics.bound
        ),
    });

    // Quadratic growth of the costs against the same declared bound.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, StreamPurpose::Validation, 2));
    let atoms = 16;
    let mut flat = vec![0.0; atoms * n];
    for value in flat.iter_mut() {
        *value = (rng.gen::<f64>() * 2.0 - 1.0) * 2.0;
    }
    let growth = (|| -> Result<SpecCheck> {
        let ensemble = crate::measure::ParticleEnsemble::from_flat(flat.clone(), n, opts.seed)?;
        let mean = ensemble.ensemble_mean();
        let m = ensemble.pop(&mean);
        let m2 = ensemble.second_moment();
        let mut worst: f64 = 0.0;
        for _ in 0..opts.samples {
            let x = DVector::from_fn(n, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * 3.0);
            let v = DVector::from_fn(d, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * 3.0);
            let s = rng.gen::<f64>() * spec.horizon;
            let bound =
                spec.dynamics.bound * (1.0 + x.norm_squared() + m2 + v.norm_squared());
            let gr = spec.cost.g(x.as_slice(), m, v.as_slice(), s).abs() / bound;
            let gt = spec.cost.g_term(x.as_slice(), m).abs() / bound;
            worst = worst.max(gr).max(gt);
        }
        Ok(SpecCheck {
            name: "cost-growth",
            passed: worst <= 1.0,
            detail: format!("max |cost| / quadratic envelope = {worst:.6}"),
        })
    })();
    checks.push(growth.unwrap_or_else(|e| SpecCheck {
        name: "cost-growth",
        passed: false,
        detail: format!("check failed to run: {e}"),
    }));

    // Strong convexity in the control slot.
    match estimate_convexity(spec, opts.samples.max(2), opts.seed) {
        Ok(est) => {
            let declared = spec.cost.lambda();
            checks.push(SpecCheck {
                name: "control-convexity",
                passed: est.lambda_hat > 0.0,
                detail: format!(
                    "sampled modulus {:.6e} (declared {declared:.6e})",
                    est.lambda_hat
                ),
            });
        }
        Err(e) => checks.push(SpecCheck {
            name: "control-convexity",
            passed: false,
            detail: format!("estimate failed: {e}"),
        }),
    }

    // Control-free diffusion, required by the Bellman/master layers.
    if opts.check_bellman_layer {
        let worst = times
            .iter()
            .map(|&s| spec.dynamics.coeffs_at(s).sigma_control_norm())
            .fold(0.0, f64::max);
        checks.push(SpecCheck {
            name: "control-free-diffusion",
            passed: worst == 0.0,
            detail: format!("max |sigma3| over sampled times = {worst:.3e}"),
        });
    }

    ValidationReport { checks }
}

// ---------------------------------------------------------------------------
// Built-in costs
// ---------------------------------------------------------------------------

/// Linear-quadratic mean-field cost
///
/// ```text
/// g   = 1/2 x'Qx + 1/2 xbar'Qbar xbar + 1/2 v'Rv
/// g_T = 1/2 x'QT x + 1/2 xbar'QbarT xbar
/// ```
///
/// All measure dependence is through the mean, and the measure derivatives
/// are affine in the probe, so the interaction kind is `MeanCoupled`. Every
/// derivative through third order is analytic (third derivatives vanish).
#[derive(Debug, Clone)]
pub struct LqCost {
    pub q: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_t: DMatrix<f64>,
    pub q_bar_t: DMatrix<f64>,
}

impl LqCost {
    pub fn new(
        q: DMatrix<f64>,
        q_bar: DMatrix<f64>,
        r: DMatrix<f64>,
        q_t: DMatrix<f64>,
        q_bar_t: DMatrix<f64>,
    ) -> Result<Self> {
        let n = q.nrows();
        let d = r.nrows();
        for (label, mat, rows, cols) in [
            ("LqCost.q", &q, n, n),
            ("LqCost.q_bar", &q_bar, n, n),
            ("LqCost.r", &r, d, d),
            ("LqCost.q_t", &q_t, n, n),
            ("LqCost.q_bar_t", &q_bar_t, n, n),
        ] {
            if mat.shape() != (rows, cols) {
                return Err(Error::dim(label, format!("({rows}, {cols})"), format!("{:?}", mat.shape())));
            }
        }
        Ok(LqCost {
            q,
            q_bar,
            r,
            q_t,
            q_bar_t,
        })
    }

    /// Scalar instance.
    pub fn scalar(q: f64, q_bar: f64, r: f64, q_t: f64, q_bar_t: f64) -> Self {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        LqCost {
            q: m(q),
            q_bar: m(q_bar),
            r: m(r),
            q_t: m(q_t),
            q_bar_t: m(q_bar_t),
        }
    }

    fn quad(mat: &DMatrix<f64>, z: &[f64]) -> f64 {
        let mut s = 0.0;
        for a in 0..mat.nrows() {
            for b in 0..mat.ncols() {
                s += z[a] * mat[(a, b)] * z[b];
            }
        }
        0.5 * s
    }

    fn mat_vec(mat: &DMatrix<f64>, z: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(mat.nrows());
        for a in 0..mat.nrows() {
            let mut s = 0.0;
            for b in 0..mat.ncols() {
                s += mat[(a, b)] * z[b];
            }
            out[a] = s;
        }
        out
    }
}

impl CostModel for LqCost {
    fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    fn control_dim(&self) -> usize {
        self.r.nrows()
    }

    fn lambda(&self) -> f64 {
        // Gap of a pure quadratic 1/2 v'Rv is 1/2 dv'R dv; the modulus is
        // half the smallest eigenvalue of R.
        0.5 * self
            .r
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    fn interaction(&self) -> InteractionKind {
        InteractionKind::MeanCoupled
    }

    fn g(&self, x: &[f64], m: Pop, v: &[f64], _s: f64) -> f64 {
        Self::quad(&self.q, x) + Self::quad(&self.q_bar, m.mean()) + Self::quad(&self.r, v)
    }

    fn g_term(&self, x: &[f64], m: Pop) -> f64 {
        Self::quad(&self.q_t, x) + Self::quad(&self.q_bar_t, m.mean())
    }

    fn d_x(&self, x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> DVector<f64> {
        Self::mat_vec(&self.q, x)
    }

    fn d_v(&self, _x: &[f64], _m: Pop, v: &[f64], _s: f64) -> DVector<f64> {
        Self::mat_vec(&self.r, v)
    }

    fn d_x_term(&self, x: &[f64], _m: Pop) -> DVector<f64> {
        Self::mat_vec(&self.q_t, x)
    }

    fn d_m(&self, _x: &[f64], m: Pop, _v: &[f64], _s: f64, p: &[f64]) -> f64 {
        // Natural representative: probe' Qbar xbar.
        Self::mat_vec(&self.q_bar, m.mean()).dot(&DVector::from_column_slice(p))
    }

    fn d_m_term(&self, _x: &[f64], m: Pop, p: &[f64]) -> f64 {
        Self::mat_vec(&self.q_bar_t, m.mean()).dot(&DVector::from_column_slice(p))
    }

    fn d_mp(&self, _x: &[f64], m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DVector<f64> {
        Self::mat_vec(&self.q_bar, m.mean())
    }

    fn d_mp_term(&self, _x: &[f64], m: Pop, _p: &[f64]) -> DVector<f64> {
        Self::mat_vec(&self.q_bar_t, m.mean())
    }

    fn d_xx(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> DMatrix<f64> {
        self.q.clone()
    }

    fn d_xv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.control_dim())
    }

    fn d_vv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> DMatrix<f64> {
        self.r.clone()
    }

    fn d_xx_term(&self, _x: &[f64], _m: Pop) -> DMatrix<f64> {
        self.q_t.clone()
    }

    fn d_mx(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DVector<f64> {
        DVector::zeros(self.state_dim())
    }

    fn d_mx_term(&self, _x: &[f64], _m: Pop, _p: &[f64]) -> DVector<f64> {
        DVector::zeros(self.state_dim())
    }

    fn d_mv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DVector<f64> {
        DVector::zeros(self.control_dim())
    }

    fn d_mxp(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    fn d_mxp_term(&self, _x: &[f64], _m: Pop, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    fn d_mvp(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.control_dim(), self.state_dim())
    }

    fn d_mpp(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    fn d_mpp_term(&self, _x: &[f64], _m: Pop, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    fn d_mm(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, p: &[f64], q: &[f64]) -> f64 {
        Self::mat_vec(&self.q_bar, q).dot(&DVector::from_column_slice(p))
    }

    fn d_mm_term(&self, _x: &[f64], _m: Pop, p: &[f64], q: &[f64]) -> f64 {
        Self::mat_vec(&self.q_bar_t, q).dot(&DVector::from_column_slice(p))
    }

    fn d_mmp(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64], q: &[f64]) -> DVector<f64> {
        Self::mat_vec(&self.q_bar, q)
    }

    fn d_mmp_term(&self, _x: &[f64], _m: Pop, _p: &[f64], q: &[f64]) -> DVector<f64> {
        Self::mat_vec(&self.q_bar_t, q)
    }

    fn d_mmpq(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64], _q: &[f64]) -> DMatrix<f64> {
        self.q_bar.clone()
    }

    fn d_mmpq_term(&self, _x: &[f64], _m: Pop, _p: &[f64], _q: &[f64]) -> DMatrix<f64> {
        self.q_bar_t.clone()
    }

    fn d_xxx(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> Tensor3 {
        let n = self.state_dim();
        Tensor3::zeros(n, n, n)
    }

    fn d_xxv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> Tensor3 {
        let (n, d) = (self.state_dim(), self.control_dim());
        Tensor3::zeros(n, n, d)
    }

    fn d_xvv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> Tensor3 {
        let (n, d) = (self.state_dim(), self.control_dim());
        Tensor3::zeros(n, d, d)
    }

    fn d_vvv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> Tensor3 {
        let d = self.control_dim();
        Tensor3::zeros(d, d, d)
    }

    fn d_xxx_term(&self, _x: &[f64], _m: Pop) -> Tensor3 {
        let n = self.state_dim();
        Tensor3::zeros(n, n, n)
    }

    fn d_mxx(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    fn d_mxx_term(&self, _x: &[f64], _m: Pop, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    fn d_mxv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.control_dim())
    }

    fn d_mvv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.control_dim(), self.control_dim())
    }

    fn d_mmpp(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64], _q: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    fn d_mmpp_term(&self, _x: &[f64], _m: Pop, _p: &[f64], _q: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }
}

/// Quadratic cost with quartic state/control perturbations and a
/// mean-reversion coupling
///
/// ```text
/// g   = 1/2 q|x|^2 + 1/4 q4|x|^4 + 1/2 kappa|x - xbar|^2
///       + 1/2 r|v|^2 + 1/4 r4|v|^4
/// g_T = 1/2 qt|x|^2 + 1/4 q4t|x|^4 + 1/2 kappat|x - xbar|^2
/// ```
///
/// Convex for nonnegative coefficients with `r > 0`. The quartic terms give
/// nonvanishing third derivatives; the coupling term keeps the measure
/// dependence mean-only.
#[derive(Debug, Clone)]
pub struct QuadQuarticCost {
    pub state_dim: usize,
    pub control_dim: usize,
    pub q: f64,
    pub q4: f64,
    pub kappa: f64,
    pub r: f64,
    pub r4: f64,
    pub q_t: f64,
    pub q4_t: f64,
    pub kappa_t: f64,
}

impl QuadQuarticCost {
    fn dev<'a>(&self, x: &'a [f64], m: Pop) -> DVector<f64> {
        DVector::from_fn(self.state_dim, |a, _| x[a] - m.mean()[a])
    }
}

impl CostModel for QuadQuarticCost {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn lambda(&self) -> f64 {
        0.5 * self.r
    }

    fn interaction(&self) -> InteractionKind {
        InteractionKind::MeanCoupled
    }

    fn g(&self, x: &[f64], m: Pop, v: &[f64], _s: f64) -> f64 {
        let x2: f64 = x.iter().map(|a| a * a).sum();
        let v2: f64 = v.iter().map(|a| a * a).sum();
        let dev2 = self.dev(x, m).norm_squared();
        0.5 * self.q * x2 + 0.25 * self.q4 * x2 * x2 + 0.5 * self.kappa * dev2
            + 0.5 * self.r * v2
            + 0.25 * self.r4 * v2 * v2
    }

    fn g_term(&self, x: &[f64], m: Pop) -> f64 {
        let x2: f64 = x.iter().map(|a| a * a).sum();
        let dev2 = self.dev(x, m).norm_squared();
        0.5 * self.q_t * x2 + 0.25 * self.q4_t * x2 * x2 + 0.5 * self.kappa_t * dev2
    }

    fn d_x(&self, x: &[f64], m: Pop, _v: &[f64], _s: f64) -> DVector<f64> {
        let x2: f64 = x.iter().map(|a| a * a).sum();
        let dev = self.dev(x, m);
        DVector::from_fn(self.state_dim, |a, _| {
            (self.q + self.q4 * x2) * x[a] + self.kappa * dev[a]
        })
    }

    fn d_v(&self, _x: &[f64], _m: Pop, v: &[f64], _s: f64) -> DVector<f64> {
        let v2: f64 = v.iter().map(|a| a * a).sum();
        DVector::from_fn(self.control_dim, |a, _| (self.r + self.r4 * v2) * v[a])
    }

    fn d_x_term(&self, x: &[f64], m: Pop) -> DVector<f64> {
        let x2: f64 = x.iter().map(|a| a * a).sum();
        let dev = self.dev(x, m);
        DVector::from_fn(self.state_dim, |a, _| {
            (self.q_t + self.q4_t * x2) * x[a] + self.kappa_t * dev[a]
        })
    }

    fn d_m(&self, x: &[f64], m: Pop, _v: &[f64], _s: f64, p: &[f64]) -> f64 {
        // Natural representative of the derivative of 1/2 kappa |x - xbar|^2:
        // -kappa (x - xbar) . probe.
        -self.kappa * self.dev(x, m).dot(&DVector::from_column_slice(p))
    }

    fn d_m_term(&self, x: &[f64], m: Pop, p: &[f64]) -> f64 {
        -self.kappa_t * self.dev(x, m).dot(&DVector::from_column_slice(p))
    }

    fn d_mp(&self, x: &[f64], m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DVector<f64> {
        self.dev(x, m) * (-self.kappa)
    }

    fn d_mp_term(&self, x: &[f64], m: Pop, _p: &[f64]) -> DVector<f64> {
        self.dev(x, m) * (-self.kappa_t)
    }

    fn d_xx(&self, x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> DMatrix<f64> {
        let x2: f64 = x.iter().map(|a| a * a).sum();
        let n = self.state_dim;
        DMatrix::from_fn(n, n, |a, b| {
            let mut h = 2.0 * self.q4 * x[a] * x[b];
            if a == b {
                h += self.q + self.q4 * x2 + self.kappa;
            }
            h
        })
    }

    fn d_xv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim, self.control_dim)
    }

    fn d_vv(&self, _x: &[f64], _m: Pop, v: &[f64], _s: f64) -> DMatrix<f64> {
        let v2: f64 = v.iter().map(|a| a * a).sum();
        let d = self.control_dim;
        DMatrix::from_fn(d, d, |a, b| {
            let mut h = 2.0 * self.r4 * v[a] * v[b];
            if a == b {
                h += self.r + self.r4 * v2;
            }
            h
        })
    }

    fn d_xx_term(&self, x: &[f64], _m: Pop) -> DMatrix<f64> {
        let x2: f64 = x.iter().map(|a| a * a).sum();
        let n = self.state_dim;
        DMatrix::from_fn(n, n, |a, b| {
            let mut h = 2.0 * self.q4_t * x[a] * x[b];
            if a == b {
                h += self.q_t + self.q4_t * x2 + self.kappa_t;
            }
            h
        })
    }

    fn d_mx(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, p: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(p) * (-self.kappa)
    }

    fn d_mx_term(&self, _x: &[f64], _m: Pop, p: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(p) * (-self.kappa_t)
    }

    fn d_mv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DVector<f64> {
        DVector::zeros(self.control_dim)
    }

    fn d_mxp(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.state_dim, self.state_dim) * (-self.kappa)
    }

    fn d_mxp_term(&self, _x: &[f64], _m: Pop, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.state_dim, self.state_dim) * (-self.kappa_t)
    }

    fn d_mvp(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.control_dim, self.state_dim)
    }

    fn d_mpp(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim, self.state_dim)
    }

    fn d_mpp_term(&self, _x: &[f64], _m: Pop, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim, self.state_dim)
    }

    fn d_mm(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, p: &[f64], q: &[f64]) -> f64 {
        self.kappa * p.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    fn d_mm_term(&self, _x: &[f64], _m: Pop, p: &[f64], q: &[f64]) -> f64 {
        self.kappa_t * p.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    fn d_mmp(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64], q: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(q) * self.kappa
    }

    fn d_mmp_term(&self, _x: &[f64], _m: Pop, _p: &[f64], q: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(q) * self.kappa_t
    }

    fn d_mmpq(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64], _q: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.state_dim, self.state_dim) * self.kappa
    }

    fn d_mmpq_term(&self, _x: &[f64], _m: Pop, _p: &[f64], _q: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.state_dim, self.state_dim) * self.kappa_t
    }

    fn d_xxx(&self, x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> Tensor3 {
        quartic_third(self.q4, x)
    }

    fn d_xxv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> Tensor3 {
        Tensor3::zeros(self.state_dim, self.state_dim, self.control_dim)
    }

    fn d_xvv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64) -> Tensor3 {
        Tensor3::zeros(self.state_dim, self.control_dim, self.control_dim)
    }

    fn d_vvv(&self, _x: &[f64], _m: Pop, v: &[f64], _s: f64) -> Tensor3 {
        quartic_third(self.r4, v)
    }

    fn d_xxx_term(&self, x: &[f64], _m: Pop) -> Tensor3 {
        quartic_third(self.q4_t, x)
    }

    fn d_mxx(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim, self.state_dim)
    }

    fn d_mxx_term(&self, _x: &[f64], _m: Pop, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim, self.state_dim)
    }

    fn d_mxv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim, self.control_dim)
    }

    fn d_mvv(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.control_dim, self.control_dim)
    }

    fn d_mmpp(&self, _x: &[f64], _m: Pop, _v: &[f64], _s: f64, _p: &[f64], _q: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim, self.state_dim)
    }

    fn d_mmpp_term(&self, _x: &[f64], _m: Pop, _p: &[f64], _q: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim, self.state_dim)
    }
}

/// Third derivative of `c/4 |z|^4`: `c * 2 (d_bc z_a + d_ac z_b + d_ab z_c)`.
fn quartic_third(c: f64, z: &[f64]) -> Tensor3 {
    let n = z.len();
    Tensor3::from_fn(n, n, n, |a, b, cc| {
        let mut t = 0.0;
        if b == cc {
            t += z[a];
        }
        if a == cc {
            t += z[b];
        }
        if a == b {
            t += z[cc];
        }
        2.0 * c * t
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::ParticleEnsemble;
    use approx::assert_relative_eq;

    fn test_pop() -> (ParticleEnsemble, DVector<f64>) {
        let e = ParticleEnsemble::from_flat(vec![0.3, -0.8, 1.1, 0.4, -0.2, 0.9], 2, 7).unwrap();
        let mean = e.ensemble_mean();
        (e, mean)
    }

    #[test]
    fn drift_is_affine_in_each_slot() {
        let mut c = DynCoeffs::zeros(2, 1);
        c.f0 = DVector::from_vec(vec![0.1, -0.2]);
        c.f1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.3, 0.2]);
        c.f2 = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.2]);
        c.f3 = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let dyn_ = LinearDynamics::constant(c, 2.0).unwrap();
        let cost = Arc::new(LqCost::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
        ).unwrap());
        let spec = ProblemSpec::new(dyn_, cost, 1.0).unwrap();
        let x1 = DVector::from_vec(vec![1.0, 2.0]);
        let x2 = DVector::from_vec(vec![-0.5, 0.3]);
        let mbar = DVector::from_vec(vec![0.2, 0.1]);
        let v = DVector::from_vec(vec![0.7]);
        let alpha = 0.3;
        let mix = &x1 * alpha + &x2 * (1.0 - alpha);
        let f_mix = spec.eval_drift(&mix, &mbar, &v, 0.5).unwrap();
        let f1 = spec.eval_drift(&x1, &mbar, &v, 0.5).unwrap();
        let f2 = spec.eval_drift(&x2, &mbar, &v, 0.5).unwrap();
        let combo = f1 * alpha + f2 * (1.0 - alpha);
        assert_relative_eq!(f_mix, combo, epsilon = 1e-14);
    }

    #[test]
    fn scalar_drift_example() {
        let mut c = DynCoeffs::zeros(1, 1);
        c.f1[(0, 0)] = 0.5;
        c.f2[(0, 0)] = 0.2;
        c.f3[(0, 0)] = 1.0;
        let dyn_ = LinearDynamics::constant(c, 2.0).unwrap();
        let cost = Arc::new(LqCost::scalar(1.0, 0.0, 1.0, 1.0, 0.0));
        let spec = ProblemSpec::new(dyn_, cost, 1.0).unwrap();
        let f = spec
            .eval_drift(
                &DVector::from_vec(vec![1.0]),
                &DVector::from_vec(vec![2.0]),
                &DVector::from_vec(vec![-1.0]),
                0.0,
            )
            .unwrap();
        assert_relative_eq!(f[0], -0.1, epsilon = 1e-15);
    }

    #[test]
    fn convexity_of_quadratic_recovers_modulus() {
        // g has 1/2 a |v|^2 with a = 2: gap / |dv|^2 = a/2 = 1 exactly.
        let dyn_ = LinearDynamics::constant(DynCoeffs::zeros(1, 1), 1.0).unwrap();
        let cost = Arc::new(LqCost::scalar(0.0, 0.0, 2.0, 0.0, 0.0));
        let spec = ProblemSpec::new(dyn_, cost, 1.0).unwrap();
        let est = estimate_convexity(&spec, 500, 3).unwrap();
        assert!((est.lambda_hat - 1.0).abs() < 1e-9, "lambda {}", est.lambda_hat);
    }

    #[test]
    fn convexity_flags_concave_cost() {
        struct Concave;
        impl CostModel for Concave {
            fn state_dim(&self) -> usize {
                1
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn lambda(&self) -> f64 {
                1.0
            }
            fn g(&self, _x: &[f64], _m: Pop, v: &[f64], _s: f64) -> f64 {
                -v[0] * v[0]
            }
            fn g_term(&self, _x: &[f64], _m: Pop) -> f64 {
                0.0
            }
        }
        let dyn_ = LinearDynamics::constant(DynCoeffs::zeros(1, 1), 1.0).unwrap();
        let spec = ProblemSpec::new(dyn_, Arc::new(Concave), 1.0).unwrap();
        let est = estimate_convexity(&spec, 100, 5).unwrap();
        assert!(est.lambda_hat < 0.0);
    }

    #[test]
    fn convexity_of_pure_quartic_is_positive_on_samples() {
        struct Quartic;
        impl CostModel for Quartic {
            fn state_dim(&self) -> usize {
                1
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn lambda(&self) -> f64 {
                0.0
            }
            fn g(&self, _x: &[f64], _m: Pop, v: &[f64], _s: f64) -> f64 {
                v[0].powi(4)
            }
            fn g_term(&self, _x: &[f64], _m: Pop) -> f64 {
                0.0
            }
        }
        let dyn_ = LinearDynamics::constant(DynCoeffs::zeros(1, 1), 1.0).unwrap();
        let spec = ProblemSpec::new(dyn_, Arc::new(Quartic), 1.0).unwrap();
        let est = estimate_convexity(&spec, 300, 11).unwrap();
        assert!(est.lambda_hat > 0.0, "lambda {}", est.lambda_hat);
    }

    #[test]
    fn validate_flags_control_dependent_diffusion_for_bellman_layer() {
        let mut c = DynCoeffs::zeros(1, 1);
        c.sig3[0][(0, 0)] = 0.5;
        let dyn_ = LinearDynamics::constant(c, 1.0).unwrap();
        let cost = Arc::new(LqCost::scalar(1.0, 0.0, 1.0, 1.0, 0.0));
        let spec = ProblemSpec::new(dyn_, cost, 1.0).unwrap();
        let mut opts = ValidationOptions::default();
        assert!(validate_spec(&spec, &opts).passed());
        opts.check_bellman_layer = true;
        let report = validate_spec(&spec, &opts);
        assert!(!report.passed());
        let failure = &report.failures()[0];
        assert_eq!(failure.name, "control-free-diffusion");
    }

    #[test]
    fn validate_is_pure() {
        let dyn_ = LinearDynamics::constant(DynCoeffs::zeros(2, 1), 1.0).unwrap();
        let cost = Arc::new(LqCost::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
        ).unwrap());
        let spec = ProblemSpec::new(dyn_, cost, 1.0).unwrap();
        let opts = ValidationOptions::default();
        let r1 = validate_spec(&spec, &opts);
        let r2 = validate_spec(&spec, &opts);
        let fmt = |r: &ValidationReport| {
            r.checks
                .iter()
                .map(|c| format!("{}|{}|{}", c.name, c.passed, c.detail))
                .collect::<Vec<_>>()
                .join(";")
        };
        assert_eq!(fmt(&r1), fmt(&r2));
    }

    #[test]
    fn lq_analytic_derivatives_match_fd_fallbacks() {
        let cost = LqCost::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]),
            DMatrix::from_element(1, 1, 1.5),
            DMatrix::identity(2, 2),
            DMatrix::from_element(2, 2, 0.2),
        )
        .unwrap();
        let (e, mean) = test_pop();
        let m = e.pop(&mean);
        let x = [0.4, -0.7];
        let v = [0.9];
        let p = [1.3, 0.2];
        let q = [-0.5, 0.8];
        let s = 0.3;

        // Point-argument derivatives against generic central differences.
        let fd_dx = fd_grad(&x, |z| cost.g(z, m, &v, s));
        assert_relative_eq!(cost.d_x(&x, m, &v, s), fd_dx, epsilon = 1e-8);
        let fd_dv = fd_grad(&v, |z| cost.g(&x, m, z, s));
        assert_relative_eq!(cost.d_v(&x, m, &v, s), fd_dv, epsilon = 1e-8);
        let fd_dmp = fd_grad(&p, |z| cost.d_m(&x, m, &v, s, z));
        assert_relative_eq!(cost.d_mp(&x, m, &v, s, &p), fd_dmp, epsilon = 1e-8);

        // Measure derivatives against mixture quotients. The quotient yields
        // the centered representative; compare after centering the analytic
        // value against m.
        let raw = fd_mixture(m, &p, |mix| cost.g(&x, mix, &v, s));
        let mut mean_dm = 0.0;
        for i in 0..m.len() {
            mean_dm += m.weight(i) * cost.d_m(&x, m, &v, s, m.atom(i));
        }
        let centered = cost.d_m(&x, m, &v, s, &p) - mean_dm;
        assert_relative_eq!(raw, centered, epsilon = 1e-6);

        // Second functional derivative cross block.
        let fd_pq = fd_jacobian(&q, 2, |z| cost.d_mmp(&x, m, &v, s, &p, z));
        assert_relative_eq!(cost.d_mmpq(&x, m, &v, s, &p, &q), fd_pq, epsilon = 1e-6);
    }

    #[test]
    fn quartic_cost_derivatives_match_fd() {
        let cost = QuadQuarticCost {
            state_dim: 2,
            control_dim: 2,
            q: 1.0,
            q4: 0.7,
            kappa: 0.6,
            r: 1.2,
            r4: 0.4,
            q_t: 0.8,
            q4_t: 0.3,
            kappa_t: 0.5,
        };
        let (e, mean) = test_pop();
        let m = e.pop(&mean);
        let x = [0.5, -0.3];
        let v = [0.4, 0.8];
        let p = [0.9, -1.1];
        let s = 0.2;

        let fd_dx = fd_grad(&x, |z| cost.g(z, m, &v, s));
        assert_relative_eq!(cost.d_x(&x, m, &v, s), fd_dx, epsilon = 1e-7);
        let fd_dxx = fd_jacobian(&x, 2, |z| cost.d_x(z, m, &v, s));
        assert_relative_eq!(cost.d_xx(&x, m, &v, s), symmetrize(fd_dxx), epsilon = 1e-7);
        let fd_dvv = fd_jacobian(&v, 2, |z| cost.d_v(&x, m, z, s));
        assert_relative_eq!(cost.d_vv(&x, m, &v, s), symmetrize(fd_dvv), epsilon = 1e-7);
        let fd_dmp = fd_grad(&p, |z| cost.d_m(&x, m, &v, s, z));
        assert_relative_eq!(cost.d_mp(&x, m, &v, s, &p), fd_dmp, epsilon = 1e-7);
        let fd_dmx = fd_grad(&x, |z| cost.d_m(z, m, &v, s, &p));
        assert_relative_eq!(cost.d_mx(&x, m, &v, s, &p), fd_dmx, epsilon = 1e-7);

        // Third derivative of the quartic term against differentiating d_xx.
        let fd_third = fd_tensor(&x, |z| cost.d_xx(z, m, &v, s));
        let ana = cost.d_xxx(&x, m, &v, s);
        for a in 0..2 {
            for b in 0..2 {
                for cc in 0..2 {
                    assert!(
                        (fd_third.get(a, b, cc) - ana.get(a, b, cc)).abs() < 1e-6,
                        "third derivative mismatch at ({a},{b},{cc})"
                    );
                }
            }
        }
    }
}
