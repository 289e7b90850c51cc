//! Small dense-vector helpers shared by the solvers.

use serde::{Deserialize, Serialize};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn scale(a: &mut [f64], alpha: f64) {
    for v in a {
        *v *= alpha;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// A sparse vector with strictly increasing 0-based indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVec {
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVec {
    /// Builds a sparse vector, checking that indices are strictly increasing.
    pub fn new(indices: Vec<usize>, values: Vec<f64>) -> Option<Self> {
        if indices.len() != values.len() || indices.windows(2).any(|w| w[0] >= w[1]) {
            return None;
        }
        Some(Self { indices, values })
    }

    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        Self { indices, values }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn dot_dense(&self, x: &[f64]) -> f64 {
        self.iter().map(|(j, v)| v * x[j]).sum()
    }

    /// `out += alpha * self`
    pub fn axpy_into(&self, alpha: f64, out: &mut [f64]) {
        for (j, v) in self.iter() {
            out[j] += alpha * v;
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (j, v) in self.iter() {
            out[j] = v;
        }
        out
    }

    pub(crate) fn scale_values(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unsorted_indices() {
        assert!(SparseVec::new(vec![1, 0], vec![1.0, 1.0]).is_none());
        assert!(SparseVec::new(vec![1, 1], vec![1.0, 1.0]).is_none());
        assert!(SparseVec::new(vec![0, 3], vec![1.0]).is_none());
    }

    #[test]
    fn sparse_dense_products_agree() {
        let dense = [0.0, 2.0, 0.0, -1.5];
        let sv = SparseVec::from_dense(&dense);
        assert_eq!(sv.indices(), &[1, 3]);
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(sv.dot_dense(&x), dot(&dense, &x));
        let mut out = vec![1.0; 4];
        sv.axpy_into(2.0, &mut out);
        assert_eq!(out, vec![1.0, 5.0, 1.0, -2.0]);
        assert_eq!(sv.to_dense(4), dense.to_vec());
    }
}
