//! Time discretization and pregenerated Brownian increments.
//!
//! All randomness in the solver flows through [`derive_seed`]: every
//! consumer (particle streams, initial ensembles, resampling, probe atoms)
//! derives its own counter-keyed seed from the run seed, so adding or
//! removing one consumer never shifts the draws of another, and results are
//! byte-identical for a given seed regardless of how many worker threads
//! fill the buffers.
//!
//! Brownian increments are sampled up front into a [`BrownianBundle`]. The
//! forward pass, the linearized flows and the finite-difference probes all
//! read the same bundle, which is what makes pathwise differencing of
//! nearby solutions meaningful (common random numbers).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Labels for independent random streams derived from one run seed.
///
/// The numeric values are part of the reproducibility contract: changing
/// them changes every derived stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    /// Per-particle Brownian increments.
    Brownian = 1,
    /// Initial ensemble sampling.
    InitialEnsemble = 2,
    /// Bootstrap resampling of an ensemble.
    Resample = 3,
    /// Brownian increments of auxiliary anchor or probe particles.
    AnchorBrownian = 4,
    /// Sampled state/control/measure tuples used by model validation.
    Validation = 5,
    /// Scratch draws in test harnesses.
    Test = 6,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed of stream (`purpose`, `index`) from the run seed.
///
/// Distinct `(purpose, index)` pairs yield statistically independent
/// streams; the same pair always yields the same stream.
#[inline]
pub fn derive_seed(seed: u64, purpose: StreamPurpose, index: u64) -> u64 {
    let a = splitmix64(seed ^ splitmix64(purpose as u64));
    splitmix64(a ^ splitmix64(index))
}

/// Uniform grid on `[t_start, t_end]` with `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidArgument {
                context: "TimeGrid::new",
                detail: format!("need finite t_start < t_end, got [{t_start}, {t_end}]"),
            });
        }
        if steps == 0 {
            return Err(Error::InvalidArgument {
                context: "TimeGrid::new",
                detail: "need at least one step".into(),
            });
        }
        Ok(TimeGrid {
            t_start,
            t_end,
            steps,
        })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    /// Knot `k` in `0..=steps`. Computed from the endpoints (not by repeated
    /// addition) so `knot(steps) == t_end` exactly.
    #[inline]
    pub fn knot(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        let lambda = k as f64 / self.steps as f64;
        self.t_start + (self.t_end - self.t_start) * lambda
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.knot(k)).collect()
    }

    /// Grid for the subinterval starting at knot `k` (same step size).
    pub fn tail(&self, k: usize) -> Result<TimeGrid> {
        if k >= self.steps {
            return Err(Error::InvalidArgument {
                context: "TimeGrid::tail",
                detail: format!("knot {k} leaves no steps out of {}", self.steps),
            });
        }
        Ok(TimeGrid {
            t_start: self.knot(k),
            t_end: self.t_end,
            steps: self.steps - k,
        })
    }
}

/// Pregenerated Brownian increments for an ensemble of particles.
///
/// Storage is flat `[particle][step][noise component]`; each increment has
/// variance `dt`. Particle `i` is filled from its own stream
/// `derive_seed(seed, purpose, i)`, so the contents do not depend on thread
/// scheduling.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBundle {
    flat: Vec<f64>,
    particles: usize,
    steps: usize,
    noise_dim: usize,
}

impl BrownianBundle {
    /// Samples increments for `particles` particles over `grid` with
    /// `noise_dim` independent components.
    pub fn sample(
        particles: usize,
        grid: &TimeGrid,
        noise_dim: usize,
        seed: u64,
        purpose: StreamPurpose,
    ) -> Self {
        let steps = grid.steps;
        let sqrt_dt = grid.dt().sqrt();
        let stride = steps * noise_dim;
        let mut flat = vec![0.0f64; particles * stride];
        flat.par_chunks_mut(stride.max(1))
            .enumerate()
            .for_each(|(i, chunk)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, i as u64));
                for value in chunk.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *value = sqrt_dt * z;
                }
            });
        BrownianBundle {
            flat,
            particles,
            steps,
            noise_dim,
        }
    }

    /// Zero-filled bundle (noiseless dynamics).
    pub fn zeros(particles: usize, steps: usize, noise_dim: usize) -> Self {
        BrownianBundle {
            flat: vec![0.0; particles * steps * noise_dim],
            particles,
            steps,
            noise_dim,
        }
    }

    #[inline]
    pub fn particles(&self) -> usize {
        self.particles
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Increment of particle `i` over step `k` (length `noise_dim`).
    #[inline]
    pub fn increment(&self, i: usize, k: usize) -> &[f64] {
        debug_assert!(i < self.particles && k < self.steps);
        let base = (i * self.steps + k) * self.noise_dim;
        &self.flat[base..base + self.noise_dim]
    }

    /// Bundle holding the increments from step `from` on, for restarting a
    /// solve on the tail grid with the same noise.
    pub fn tail(&self, from: usize) -> Result<BrownianBundle> {
        if from >= self.steps {
            return Err(Error::InvalidArgument {
                context: "BrownianBundle::tail",
                detail: format!("step {from} leaves no steps out of {}", self.steps),
            });
        }
        let new_steps = self.steps - from;
        let mut flat = vec![0.0; self.particles * new_steps * self.noise_dim];
        for i in 0..self.particles {
            let src = (i * self.steps + from) * self.noise_dim;
            let dst = i * new_steps * self.noise_dim;
            let len = new_steps * self.noise_dim;
            flat[dst..dst + len].copy_from_slice(&self.flat[src..src + len]);
        }
        Ok(BrownianBundle {
            flat,
            particles: self.particles,
            steps: new_steps,
            noise_dim: self.noise_dim,
        })
    }

    /// Appends the increments of `extra` (same grid and noise dimension) as
    /// additional particles, preserving existing indices.
    pub fn concat(&self, extra: &BrownianBundle) -> Result<BrownianBundle> {
        if extra.steps != self.steps || extra.noise_dim != self.noise_dim {
            return Err(Error::dim(
                "BrownianBundle::concat",
                format!("{} steps x {} noise dims", self.steps, self.noise_dim),
                format!("{} steps x {} noise dims", extra.steps, extra.noise_dim),
            ));
        }
        let mut flat = Vec::with_capacity(self.flat.len() + extra.flat.len());
        flat.extend_from_slice(&self.flat);
        flat.extend_from_slice(&extra.flat);
        Ok(BrownianBundle {
            flat,
            particles: self.particles + extra.particles,
            steps: self.steps,
            noise_dim: self.noise_dim,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_are_exact() {
        let grid = TimeGrid::new(0.0, 1.0, 7).unwrap();
        assert_eq!(grid.knot(0), 0.0);
        assert_eq!(grid.knot(7), 1.0);
        let grid = TimeGrid::new(0.3, 2.7, 13).unwrap();
        assert_eq!(grid.knot(13), 2.7);
    }

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let s1 = derive_seed(42, StreamPurpose::Brownian, 0);
        let s2 = derive_seed(42, StreamPurpose::Brownian, 0);
        let s3 = derive_seed(42, StreamPurpose::Brownian, 1);
        let s4 = derive_seed(42, StreamPurpose::AnchorBrownian, 0);
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
        assert_ne!(s1, s4);
    }

    #[test]
    fn bundle_content_is_independent_of_worker_count() {
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let sample_with_threads = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| BrownianBundle::sample(33, &grid, 2, 9001, StreamPurpose::Brownian))
        };
        let one = sample_with_threads(1);
        let four = sample_with_threads(4);
        assert_eq!(one, four);
    }

    #[test]
    fn increment_moments_match_brownian_scaling() {
        let grid = TimeGrid::new(0.0, 2.0, 50).unwrap();
        let n = 400;
        let bundle = BrownianBundle::sample(n, &grid, 1, 5, StreamPurpose::Brownian);
        let count = (n * grid.steps) as f64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            for k in 0..grid.steps {
                let w = bundle.increment(i, k)[0];
                sum += w;
                sum_sq += w * w;
            }
        }
        let dt = grid.dt();
        let mean = sum / count;
        let var = sum_sq / count;
        // Standard error of the mean is sqrt(dt / count).
        assert!(mean.abs() < 4.0 * (dt / count).sqrt(), "mean {mean}");
        assert!((var / dt - 1.0).abs() < 4.0 * (2.0 / count).sqrt(), "var {var}");
    }

    #[test]
    fn tail_preserves_increments() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let bundle = BrownianBundle::sample(3, &grid, 2, 17, StreamPurpose::Brownian);
        let tail = bundle.tail(4).unwrap();
        assert_eq!(tail.steps(), 6);
        for i in 0..3 {
            for k in 0..6 {
                assert_eq!(tail.increment(i, k), bundle.increment(i, k + 4));
            }
        }
    }
}
