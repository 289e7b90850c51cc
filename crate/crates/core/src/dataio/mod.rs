//! Datasets: libsvm parsing and serialization, synthetic generation,
//! row normalization and high-precision reference optima.

mod libsvm;
mod reference;
mod synth;

pub use libsvm::{parse_libsvm, read_libsvm_file, write_libsvm, write_libsvm_file, ParseOptions};
pub use reference::{
    reference_optimum, reference_optimum_from, ReferenceOptions, ReferenceSolution,
};
pub use synth::{synthesize, Conditioning, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::SparseVec;

/// Learning task, which constrains the admissible labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Labels in {-1, +1}.
    Classification,
    /// Real-valued labels.
    Regression,
}

/// Sparse feature rows `a_i` with responses `b_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    rows: Vec<SparseVec>,
    labels: Vec<f64>,
    task: Task,
}

impl Dataset {
    pub fn new(dim: usize, rows: Vec<SparseVec>, labels: Vec<f64>, task: Task) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(invalid(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if dim == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        for (i, row) in rows.iter().enumerate() {
            if let Some(&last) = row.indices().last() {
                if last >= dim {
                    return Err(invalid(format!(
                        "row {i} has index {last} outside dimension {dim}"
                    )));
                }
            }
            if row.values().iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("row {i} has a non-finite value")));
            }
        }
        for (i, &b) in labels.iter().enumerate() {
            if !b.is_finite() {
                return Err(invalid(format!("label {i} is not finite")));
            }
            if task == Task::Classification && b != 1.0 && b != -1.0 {
                return Err(invalid(format!(
                    "classification label {i} is {b}, expected -1 or +1"
                )));
            }
        }
        Ok(Self {
            dim,
            rows,
            labels,
            task,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &SparseVec {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[SparseVec] {
        &self.rows
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Total stored entries.
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(SparseVec::nnz).sum()
    }

    /// Scales every nonzero row to unit Euclidean norm. Zero rows are kept as is.
    pub fn normalize_rows(mut self) -> Self {
        for row in &mut self.rows {
            let norm = row.norm_sq().sqrt();
            if norm > 0.0 {
                row.scale_values(1.0 / norm);
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(idx: &[usize], val: &[f64]) -> SparseVec {
        SparseVec::new(idx.to_vec(), val.to_vec()).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let ds = Dataset::new(
            2,
            vec![row(&[0, 1], &[3.0, 4.0]), row(&[], &[])],
            vec![1.0, -1.0],
            Task::Classification,
        )
        .unwrap()
        .normalize_rows();
        for (v, w) in ds.row(0).values().iter().zip([0.6, 0.8]) {
            assert!((v - w).abs() <= 1e-15);
        }
        assert_eq!(ds.row(1).nnz(), 0);
        assert_eq!(ds.labels(), &[1.0, -1.0]);
    }

    #[test]
    fn rejects_bad_labels_and_indices() {
        assert!(Dataset::new(2, vec![row(&[0], &[1.0])], vec![0.5], Task::Classification).is_err());
        assert!(Dataset::new(2, vec![row(&[2], &[1.0])], vec![1.0], Task::Regression).is_err());
        assert!(Dataset::new(2, vec![row(&[0], &[1.0])], vec![], Task::Regression).is_err());
    }

    #[test]
    fn normalize_is_idempotent_on_random_rows() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<SparseVec> = (0..50)
            .map(|_| {
                let dense: Vec<f64> = (0..12)
                    .map(|_| {
                        if rng.random::<f64>() < 0.4 {
                            rng.random_range(-5.0..5.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                SparseVec::from_dense(&dense)
            })
            .collect();
        let labels = vec![0.0; rows.len()];
        let once = Dataset::new(12, rows, labels, Task::Regression)
            .unwrap()
            .normalize_rows();
        for r in once.rows() {
            if r.nnz() > 0 {
                assert!((r.norm_sq().sqrt() - 1.0).abs() <= 1e-12);
            }
        }
        let twice = once.clone().normalize_rows();
        for (a, b) in once.rows().iter().zip(twice.rows()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() <= 1e-15);
            }
        }
    }
}
