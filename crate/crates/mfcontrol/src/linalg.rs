//! Small dense-tensor helpers used by the derivative machinery.
//!
//! State and control dimensions are tiny (rarely above four), so a plain
//! `Vec<f64>` with explicit index arithmetic is both fast and transparent.
//! `nalgebra` covers orders one and two; this module adds the rank-three
//! tensors needed for third-derivative callbacks.

use nalgebra::{DMatrix, DVector};

/// Dense rank-three tensor `T[i][j][k]` with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    /// Zero tensor with the given dimensions.
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Tensor3 {
            dims: (d0, d1, d2),
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    /// Builds a tensor from a function of the index triple.
    pub fn from_fn(d0: usize, d1: usize, d2: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor3::zeros(d0, d1, d2);
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    t.set(i, j, k, f(i, j, k));
                }
            }
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert!(i < self.dims.0 && j < self.dims.1 && k < self.dims.2);
        self.data[(i * self.dims.1 + j) * self.dims.2 + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        debug_assert!(i < self.dims.0 && j < self.dims.1 && k < self.dims.2);
        self.data[(i * self.dims.1 + j) * self.dims.2 + k] = value;
    }

    /// Contracts the first index with `v`: `M[j][k] = sum_i T[i][j][k] v[i]`.
    pub fn contract_0(&self, v: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(v.len(), self.dims.0, "contract_0 length mismatch");
        let mut m = DMatrix::zeros(self.dims.1, self.dims.2);
        for i in 0..self.dims.0 {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for j in 0..self.dims.1 {
                for k in 0..self.dims.2 {
                    m[(j, k)] += vi * self.get(i, j, k);
                }
            }
        }
        m
    }

    /// Contracts the second index with `v`: `M[i][k] = sum_j T[i][j][k] v[j]`.
    pub fn contract_1(&self, v: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(v.len(), self.dims.1, "contract_1 length mismatch");
        let mut m = DMatrix::zeros(self.dims.0, self.dims.2);
        for i in 0..self.dims.0 {
            for j in 0..self.dims.1 {
                let vj = v[j];
                if vj == 0.0 {
                    continue;
                }
                for k in 0..self.dims.2 {
                    m[(i, k)] += vj * self.get(i, j, k);
                }
            }
        }
        m
    }

    /// Contracts the third index with `v`: `M[i][j] = sum_k T[i][j][k] v[k]`.
    pub fn contract_2(&self, v: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(v.len(), self.dims.2, "contract_2 length mismatch");
        let mut m = DMatrix::zeros(self.dims.0, self.dims.1);
        for i in 0..self.dims.0 {
            for j in 0..self.dims.1 {
                let mut acc = 0.0;
                for k in 0..self.dims.2 {
                    acc += self.get(i, j, k) * v[k];
                }
                m[(i, j)] = acc;
            }
        }
        m
    }

    /// Maximum absolute entry; zero tensors short-circuit driver assembly.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |a, x| a.max(x.abs()))
    }

    pub fn scale_mut(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        assert_eq!(self.dims, other.dims, "tensor dimension mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

/// Weighted mean of per-particle vectors stored as flat `[i][c]` data.
/// Summation runs in particle order so the result does not depend on the
/// thread count of any parallel stage that produced the data.
pub fn weighted_mean_flat(flat: &[f64], dim: usize, weights: &[f64]) -> DVector<f64> {
    assert_eq!(flat.len(), dim * weights.len(), "flat field length mismatch");
    let mut mean = DVector::zeros(dim);
    for (i, w) in weights.iter().enumerate() {
        let row = &flat[i * dim..(i + 1) * dim];
        for c in 0..dim {
            mean[c] += w * row[c];
        }
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contraction_matches_manual_sum() {
        let t = Tensor3::from_fn(2, 3, 2, |i, j, k| (i + 2 * j + 4 * k) as f64);
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let m = t.contract_1(&v);
        let mut expect = 0.0;
        for j in 0..3 {
            expect += v[j] * t.get(1, j, 0);
        }
        assert_eq!(m[(1, 0)], expect);
    }

    #[test]
    fn weighted_mean_uses_weights() {
        let flat = vec![1.0, 0.0, 3.0, 2.0];
        let mean = weighted_mean_flat(&flat, 2, &[0.25, 0.75]);
        assert_eq!(mean[0], 0.25 + 0.75 * 3.0);
        assert_eq!(mean[1], 0.75 * 2.0);
    }
}
