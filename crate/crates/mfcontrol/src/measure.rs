//! Weighted particle ensembles and distances between them.
//!
//! A probability measure on the state space is represented by a finite
//! weighted ensemble of atoms. The module provides the operations the solver
//! layers build on: weighted means and moments, pushforward under a state
//! map, bootstrap resampling, Dirac-mass perturbations (the basic probe for
//! distributional derivatives) and the Wasserstein-2 distance.
//!
//! Wasserstein-2 is computed exactly where an exact algorithm is practical:
//! a quantile coupling in one dimension (any weights), and an optimal
//! assignment in higher dimension for uniform ensembles of equal size up to
//! [`EXACT_ASSIGNMENT_LIMIT`] atoms. Above that the entropically regularized
//! transport cost is returned; the regularization strength is tied to the
//! median inter-ensemble distance so the approximation scales with the data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::paths::{derive_seed, StreamPurpose};

/// Largest ensemble size for which the exact assignment solver is used in
/// dimension two and above. The solver is cubic in the atom count.
pub const EXACT_ASSIGNMENT_LIMIT: usize = 512;

/// Weight normalization tolerance: a valid ensemble's weights must sum to
/// one within this bound.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Borrowed view of a population used by cost callbacks and driver assembly.
///
/// Atoms live in a flat `[atom][component]` buffer; the mean is precomputed
/// by the owner so tight loops do not recompute it per call.
#[derive(Clone, Copy)]
pub struct Pop<'a> {
    flat: &'a [f64],
    dim: usize,
    weights: &'a [f64],
    mean: &'a [f64],
}

impl<'a> Pop<'a> {
    pub fn new(flat: &'a [f64], dim: usize, weights: &'a [f64], mean: &'a [f64]) -> Self {
        debug_assert_eq!(flat.len(), dim * weights.len());
        debug_assert_eq!(mean.len(), dim);
        Pop {
            flat,
            dim,
            weights,
            mean,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn atom(&self, i: usize) -> &'a [f64] {
        &self.flat[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    #[inline]
    pub fn weights(&self) -> &'a [f64] {
        self.weights
    }

    /// Weighted population mean, precomputed by the owner.
    #[inline]
    pub fn mean(&self) -> &'a [f64] {
        self.mean
    }
}

/// Weighted particle approximation of a probability measure.
///
/// Invariants established at construction: every atom has the same dimension,
/// weights are nonnegative and sum to one within [`WEIGHT_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    /// Atom coordinates, flat `[atom][component]`.
    flat: Vec<f64>,
    dim: usize,
    weights: Vec<f64>,
    /// Seed recorded at generation time; derived streams (resampling, probe
    /// atoms) key off it so downstream draws are reproducible.
    generation_seed: u64,
}

impl ParticleEnsemble {
    /// Builds an ensemble from an `N x n` state matrix (row `i` = atom `i`).
    pub fn new(states: &DMatrix<f64>, weights: Vec<f64>, generation_seed: u64) -> Result<Self> {
        let count = states.nrows();
        let dim = states.ncols();
        if weights.len() != count {
            return Err(Error::dim(
                "ParticleEnsemble::new",
                format!("{count} weights"),
                format!("{}", weights.len()),
            ));
        }
        validate_weights(&weights)?;
        let mut flat = vec![0.0; count * dim];
        for i in 0..count {
            for c in 0..dim {
                flat[i * dim + c] = states[(i, c)];
            }
        }
        Ok(ParticleEnsemble {
            flat,
            dim,
            weights,
            generation_seed,
        })
    }

    /// Builds a uniformly weighted ensemble from flat `[atom][component]` data.
    pub fn from_flat(flat: Vec<f64>, dim: usize, generation_seed: u64) -> Result<Self> {
        if dim == 0 || flat.len() % dim != 0 || flat.is_empty() {
            return Err(Error::InvalidArgument {
                context: "ParticleEnsemble::from_flat",
                detail: format!("flat length {} incompatible with dim {}", flat.len(), dim),
            });
        }
        let count = flat.len() / dim;
        Ok(ParticleEnsemble {
            flat,
            dim,
            weights: vec![1.0 / count as f64; count],
            generation_seed,
        })
    }

    /// Samples `count` atoms from an isotropic Gaussian with per-component
    /// mean and standard deviation. Deterministic in `seed`.
    pub fn gaussian(
        count: usize,
        mean: &DVector<f64>,
        std: &DVector<f64>,
        seed: u64,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument {
                context: "ParticleEnsemble::gaussian",
                detail: "count must be positive".into(),
            });
        }
        if mean.len() != std.len() {
            return Err(Error::dim(
                "ParticleEnsemble::gaussian",
                format!("std of length {}", mean.len()),
                format!("{}", std.len()),
            ));
        }
        let dim = mean.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, StreamPurpose::InitialEnsemble, 0));
        let mut flat = vec![0.0; count * dim];
        for i in 0..count {
            for c in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                flat[i * dim + c] = mean[c] + std[c] * z;
            }
        }
        ParticleEnsemble::from_flat(flat, dim, seed)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn generation_seed(&self) -> u64 {
        self.generation_seed
    }

    #[inline]
    pub fn atom(&self, i: usize) -> &[f64] {
        &self.flat[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn atoms_flat(&self) -> &[f64] {
        &self.flat
    }

    /// Copies the atoms into an `N x n` matrix (row `i` = atom `i`).
    pub fn states_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim, |i, c| self.flat[i * self.dim + c])
    }

    /// Weighted mean of the atoms.
    pub fn ensemble_mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim);
        for i in 0..self.len() {
            let w = self.weights[i];
            for c in 0..self.dim {
                mean[c] += w * self.flat[i * self.dim + c];
            }
        }
        mean
    }

    /// Weighted second moment `integral of |y|^2 dm(y)`.
    pub fn second_moment(&self) -> f64 {
        let mut m2 = 0.0;
        for i in 0..self.len() {
            let a = self.atom(i);
            let mut s = 0.0;
            for c in 0..self.dim {
                s += a[c] * a[c];
            }
            m2 += self.weights[i] * s;
        }
        m2
    }

    /// Borrowed view with a caller-owned mean buffer.
    pub fn pop<'a>(&'a self, mean: &'a DVector<f64>) -> Pop<'a> {
        Pop::new(&self.flat, self.dim, &self.weights, mean.as_slice())
    }

    /// Applies a state map atomwise; weights and seed are carried over.
    pub fn pushforward(&self, map: impl Fn(&[f64]) -> DVector<f64>) -> Result<Self> {
        let mut out: Option<Vec<f64>> = None;
        let mut out_dim = 0;
        for i in 0..self.len() {
            let image = map(self.atom(i));
            if i == 0 {
                out_dim = image.len();
                if out_dim == 0 {
                    return Err(Error::InvalidArgument {
                        context: "pushforward",
                        detail: "map returned a zero-dimensional state".into(),
                    });
                }
                out = Some(vec![0.0; self.len() * out_dim]);
            } else if image.len() != out_dim {
                return Err(Error::dim(
                    "pushforward",
                    format!("{out_dim}"),
                    format!("{}", image.len()),
                ));
            }
            let buf = out.as_mut().expect("initialized on first atom");
            buf[i * out_dim..(i + 1) * out_dim].copy_from_slice(image.as_slice());
        }
        Ok(ParticleEnsemble {
            flat: out.expect("non-empty ensemble"),
            dim: out_dim,
            weights: self.weights.clone(),
            generation_seed: self.generation_seed,
        })
    }

    /// Appends a Dirac atom at `atom` with mass `eps`, scaling the existing
    /// weights by `1 - eps`. The base atoms are untouched, so quantities
    /// evaluated on them can be differenced against the unperturbed ensemble
    /// with common randomness.
    pub fn perturb_dirac(&self, atom: &DVector<f64>, eps: f64) -> Result<DiracPerturbation> {
        if atom.len() != self.dim {
            return Err(Error::dim(
                "perturb_dirac",
                format!("{}", self.dim),
                format!("{}", atom.len()),
            ));
        }
        if !(0.0..1.0).contains(&eps) || eps <= 0.0 {
            return Err(Error::InvalidArgument {
                context: "perturb_dirac",
                detail: format!("mixture weight eps = {eps} must lie in (0, 1)"),
            });
        }
        let mut flat = Vec::with_capacity(self.flat.len() + self.dim);
        flat.extend_from_slice(&self.flat);
        flat.extend_from_slice(atom.as_slice());
        let mut weights = Vec::with_capacity(self.len() + 1);
        weights.extend(self.weights.iter().map(|w| w * (1.0 - eps)));
        weights.push(eps);
        Ok(DiracPerturbation {
            ensemble: ParticleEnsemble {
                flat,
                dim: self.dim,
                weights,
                generation_seed: self.generation_seed,
            },
            eps,
            atom: atom.clone(),
        })
    }

    /// Bootstrap resample: draws `self.len()` atoms with replacement
    /// according to the weights. Deterministic in `seed`; the result is
    /// uniformly weighted.
    pub fn resample_copy(&self, seed: u64) -> Self {
        let mut cumulative = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cumulative.push(acc);
        }
        let total = acc;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, StreamPurpose::Resample, 0));
        let mut flat = vec![0.0; self.flat.len()];
        for i in 0..self.len() {
            let u: f64 = rng.gen::<f64>() * total;
            let idx = match cumulative.binary_search_by(|c| c.partial_cmp(&u).expect("finite")) {
                Ok(j) => j,
                Err(j) => j.min(self.len() - 1),
            };
            flat[i * self.dim..(i + 1) * self.dim].copy_from_slice(self.atom(idx));
        }
        ParticleEnsemble {
            flat,
            dim: self.dim,
            weights: vec![1.0 / self.len() as f64; self.len()],
            generation_seed: seed,
        }
    }
}

/// Result of mixing a Dirac atom into an ensemble.
#[derive(Debug, Clone)]
pub struct DiracPerturbation {
    /// The mixed ensemble `(1 - eps) m + eps delta_atom`; the original atoms
    /// keep their order, the probe atom is appended last.
    pub ensemble: ParticleEnsemble,
    /// Mixture weight of the probe atom.
    pub eps: f64,
    /// Probe location.
    pub atom: DVector<f64>,
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() || *w < 0.0 {
            return Err(Error::Weights {
                detail: format!("weight {i} = {w} is negative or not finite"),
            });
        }
        sum += w;
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Weights {
            detail: format!("weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL}"),
        });
    }
    Ok(())
}

/// Squared Euclidean distance between two atoms.
#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Wasserstein-2 distance between two ensembles on the same state space.
///
/// Algorithm selection:
/// - dimension 1: exact quantile coupling, any weights;
/// - dimension > 1, both uniform with the same atom count at most
///   [`EXACT_ASSIGNMENT_LIMIT`]: exact optimal assignment;
/// - otherwise: entropically regularized transport cost with
///   `eps = 0.01 * (median pairwise distance)^2` (a small upward-biased
///   approximation; adequate for diagnostics, not for metric-axiom tests).
///
/// The argument pair is canonicalized internally so the call is exactly
/// symmetric in its arguments.
pub fn wasserstein2(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim(
            "wasserstein2",
            format!("{}", a.dim()),
            format!("{}", b.dim()),
        ));
    }
    // Canonical argument order makes the arithmetic identical for (a, b) and
    // (b, a), so symmetry holds bitwise.
    if should_swap(a, b) {
        return wasserstein2(b, a);
    }
    if a.dim() == 1 {
        return Ok(quantile_coupling_1d(a, b).sqrt());
    }
    let uniform = |e: &ParticleEnsemble| {
        let w0 = 1.0 / e.len() as f64;
        e.weights().iter().all(|w| (w - w0).abs() <= 1e-15)
    };
    if a.len() == b.len() && a.len() <= EXACT_ASSIGNMENT_LIMIT && uniform(a) && uniform(b) {
        let n = a.len();
        let cost = DMatrix::from_fn(n, n, |i, j| sq_dist(a.atom(i), b.atom(j)));
        let total = assignment_cost(&cost);
        return Ok((total / n as f64).max(0.0).sqrt());
    }
    entropic_transport_cost(a, b).map(|c| c.max(0.0).sqrt())
}

fn should_swap(a: &ParticleEnsemble, b: &ParticleEnsemble) -> bool {
    if a.len() != b.len() {
        return a.len() > b.len();
    }
    for (x, y) in a.atoms_flat().iter().zip(b.atoms_flat().iter()) {
        if x < y {
            return false;
        }
        if x > y {
            return true;
        }
    }
    for (x, y) in a.weights().iter().zip(b.weights().iter()) {
        if x < y {
            return false;
        }
        if x > y {
            return true;
        }
    }
    false
}

/// Exact squared W2 in one dimension via the quantile (monotone) coupling.
fn quantile_coupling_1d(a: &ParticleEnsemble, b: &ParticleEnsemble) -> f64 {
    let sorted = |e: &ParticleEnsemble| {
        let mut idx: Vec<usize> = (0..e.len()).collect();
        idx.sort_by(|&i, &j| e.atom(i)[0].partial_cmp(&e.atom(j)[0]).expect("finite atom"));
        idx
    };
    let ia = sorted(a);
    let ib = sorted(b);
    let mut cost = 0.0;
    let (mut pa, mut pb) = (0usize, 0usize);
    let mut ra = a.weights()[ia[0]];
    let mut rb = b.weights()[ib[0]];
    loop {
        let step = ra.min(rb);
        let d = a.atom(ia[pa])[0] - b.atom(ib[pb])[0];
        cost += step * d * d;
        ra -= step;
        rb -= step;
        if ra <= 0.0 {
            pa += 1;
            if pa >= ia.len() {
                break;
            }
            ra = a.weights()[ia[pa]];
        }
        if rb <= 0.0 {
            pb += 1;
            if pb >= ib.len() {
                break;
            }
            rb = b.weights()[ib[pb]];
        }
    }
    cost
}

/// Minimum-cost perfect assignment on a square cost matrix (shortest
/// augmenting path formulation, cubic time). Returns the total cost.
fn assignment_cost(cost: &DMatrix<f64>) -> f64 {
    let n = cost.nrows();
    debug_assert_eq!(n, cost.ncols());
    // Potentials u (rows), v (columns); p[j] = row matched to column j.
    // Index 0 is a virtual column used to start each augmenting search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        total += cost[(p[j] - 1, j - 1)];
    }
    total
}

/// Entropically regularized squared transport cost (Sinkhorn iteration in the
/// log domain). Regularization: `0.01 * (median pairwise distance)^2`.
fn entropic_transport_cost(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    let (na, nb) = (a.len(), b.len());
    let mut cost = vec![0.0f64; na * nb];
    let mut dists = Vec::with_capacity(na * nb);
    for i in 0..na {
        for j in 0..nb {
            let c = sq_dist(a.atom(i), b.atom(j));
            cost[i * nb + j] = c;
            dists.push(c.sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distance"));
    let median = dists[dists.len() / 2];
    if median == 0.0 {
        // All cross distances vanish: the ensembles share a single support
        // point, so the distance is zero.
        return Ok(0.0);
    }
    let eps_target = 0.01 * median * median;
    let log_wa: Vec<f64> = a.weights().iter().map(|w| w.max(1e-300).ln()).collect();
    let log_wb: Vec<f64> = b.weights().iter().map(|w| w.max(1e-300).ln()).collect();
    let mut f = vec![0.0f64; na];
    let mut g = vec![0.0f64; nb];
    let log_sum_exp = |terms: &mut dyn Iterator<Item = f64>| -> f64 {
        let collected: Vec<f64> = terms.collect();
        let m = collected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + collected.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    };
    // Anneal the regularization from the median scale down to the target,
    // warm-starting the potentials at each level; plain iteration at the
    // target strength alone stalls for small eps.
    let mut schedule = vec![eps_target];
    let mut e = eps_target;
    while e < median * median {
        e *= 4.0;
        schedule.push(e);
    }
    schedule.reverse();
    let levels = schedule.len();
    let mut converged = false;
    for (level, &eps) in schedule.iter().enumerate() {
        let last = level + 1 == levels;
        let max_iter = if last { 20_000 } else { 500 };
        for _ in 0..max_iter {
            for i in 0..na {
                let mut it = (0..nb).map(|j| log_wb[j] + (g[j] - cost[i * nb + j]) / eps);
                f[i] = -eps * log_sum_exp(&mut it);
            }
            for j in 0..nb {
                let mut it = (0..na).map(|i| log_wa[i] + (f[i] - cost[i * nb + j]) / eps);
                g[j] = -eps * log_sum_exp(&mut it);
            }
            // Column marginals are exact right after the g-update; the gap
            // reopened by the f-update measures convergence.
            let mut err: f64 = 0.0;
            for j in 0..nb {
                let mut it = (0..na)
                    .map(|i| log_wa[i] + log_wb[j] + (f[i] + g[j] - cost[i * nb + j]) / eps);
                let col_mass = log_sum_exp(&mut it).exp();
                err = err.max((col_mass - b.weights()[j]).abs());
            }
            if err < if last { 1e-6 } else { 1e-4 } {
                converged = last;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::Unsupported {
            detail: "entropic transport did not reach marginal tolerance 1e-6".into(),
        });
    }
    let eps = eps_target;
    let mut total = 0.0;
    for i in 0..na {
        for j in 0..nb {
            let log_pi = log_wa[i] + log_wb[j] + (f[i] + g[j] - cost[i * nb + j]) / eps;
            total += log_pi.exp() * cost[i * nb + j];
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_1d(values: &[f64], seed: u64) -> ParticleEnsemble {
        ParticleEnsemble::from_flat(values.to_vec(), 1, seed).unwrap()
    }

    #[test]
    fn quantile_coupling_matches_known_shift() {
        // Two uniform 3-atom ensembles offset by 0.5: every quantile moves
        // by 0.5, so W2 = 0.5.
        let a = uniform_1d(&[0.0, 1.0, 2.0], 1);
        let b = uniform_1d(&[0.5, 1.5, 2.5], 2);
        let d = wasserstein2(&a, &b).unwrap();
        assert!((d - 0.5).abs() < 1e-14, "W2 = {d}, expected 0.5");
    }

    #[test]
    fn assignment_matches_brute_force_small() {
        // Oracle: explicit minimum over all permutations.
        fn brute(cost: &DMatrix<f64>) -> f64 {
            fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
                let n = cost.nrows();
                if row == n {
                    return 0.0;
                }
                let mut best = f64::INFINITY;
                for j in 0..n {
                    if !used[j] {
                        used[j] = true;
                        let c = cost[(row, j)] + rec(cost, row + 1, used);
                        used[j] = false;
                        best = best.min(c);
                    }
                }
                best
            }
            rec(cost, 0, &mut vec![false; cost.ncols()])
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in 1..=7usize {
            let cost = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() * 10.0);
            let fast = assignment_cost(&cost);
            let slow = brute(&cost);
            assert!(
                (fast - slow).abs() < 1e-10,
                "assignment cost {fast} vs brute force {slow} at n = {n}"
            );
        }
    }

    #[test]
    fn wasserstein_swap_is_bitwise_symmetric() {
        let a = uniform_1d(&[0.3, -1.2, 0.7, 2.2], 3);
        let b = uniform_1d(&[0.0, 0.5, -0.5, 1.0], 4);
        let ab = wasserstein2(&a, &b).unwrap();
        let ba = wasserstein2(&b, &a).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn dirac_perturbation_reweights() {
        let base = uniform_1d(&[0.0, 1.0], 9);
        let probe = DVector::from_vec(vec![5.0]);
        let pert = base.perturb_dirac(&probe, 0.25).unwrap();
        assert_eq!(pert.ensemble.len(), 3);
        assert!((pert.ensemble.weights()[0] - 0.375).abs() < 1e-15);
        assert!((pert.ensemble.weights()[2] - 0.25).abs() < 1e-15);
        assert_eq!(pert.ensemble.atom(0), base.atom(0));
        let total: f64 = pert.ensemble.weights().iter().sum();
        assert!((total - 1.0).abs() < WEIGHT_SUM_TOL);
    }

    #[test]
    fn entropic_close_to_exact_on_small_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 24;
        let mut fa = Vec::new();
        let mut fb = Vec::new();
        for _ in 0..n {
            fa.extend([rng.gen::<f64>(), rng.gen::<f64>()]);
            fb.extend([rng.gen::<f64>() + 0.4, rng.gen::<f64>()]);
        }
        let a = ParticleEnsemble::from_flat(fa, 2, 1).unwrap();
        let b = ParticleEnsemble::from_flat(fb, 2, 2).unwrap();
        let cost = DMatrix::from_fn(n, n, |i, j| sq_dist(a.atom(i), b.atom(j)));
        let exact = (assignment_cost(&cost) / n as f64).sqrt();
        let approx = entropic_transport_cost(&a, &b).unwrap().sqrt();
        let rel = (approx - exact).abs() / exact;
        assert!(
            rel < 0.05,
            "entropic estimate {approx} vs exact {exact} (rel {rel})"
        );
    }

    #[test]
    fn resample_is_deterministic_in_seed() {
        let base = uniform_1d(&[0.0, 1.0, 2.0, 3.0], 11);
        let r1 = base.resample_copy(77);
        let r2 = base.resample_copy(77);
        let r3 = base.resample_copy(78);
        assert_eq!(r1.atoms_flat(), r2.atoms_flat());
        assert_ne!(r1.atoms_flat(), r3.atoms_flat());
    }
}
