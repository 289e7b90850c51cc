//! Limited-memory inverse-Hessian approximations built from correction
//! pairs, plus the sliding-window iterate averager that feeds them.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, dot, norm_sq, sub};
use crate::problem::ErmProblem;
use crate::svrg::DataPassMeter;

/// Relative curvature threshold: pairs with `s^T y <= floor * ||s|| ||y||`
/// are skipped.
pub const CURVATURE_FLOOR: f64 = 1e-12;

/// Largest dimension for which dense matrices are materialized.
pub const DENSE_LIMIT: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPair {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub sy: f64,
    pub yy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    ZeroStep,
    NonPositiveCurvature,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairOutcome {
    Accepted(CorrectionPair),
    Skip(SkipReason),
}

impl CorrectionPair {
    /// Validates a candidate pair against the curvature guard.
    pub fn check(s: Vec<f64>, y: Vec<f64>) -> PairOutcome {
        if !all_finite(&s) || !all_finite(&y) {
            return PairOutcome::Skip(SkipReason::NonFinite);
        }
        let ss = norm_sq(&s);
        if ss == 0.0 {
            return PairOutcome::Skip(SkipReason::ZeroStep);
        }
        let sy = dot(&s, &y);
        let yy = norm_sq(&y);
        if yy == 0.0 || sy <= CURVATURE_FLOOR * ss.sqrt() * yy.sqrt() {
            return PairOutcome::Skip(SkipReason::NonPositiveCurvature);
        }
        PairOutcome::Accepted(CorrectionPair { s, y, sy, yy })
    }

    /// Builds a pair without the curvature guard. Test hook only.
    #[doc(hidden)]
    pub fn unchecked(s: Vec<f64>, y: Vec<f64>) -> Self {
        let sy = dot(&s, &y);
        let yy = norm_sq(&y);
        Self { s, y, sy, yy }
    }
}

/// `s = xbar_new - xbar_old`, `y = (1/|T|) sum_{i in T} grad^2 f_i(xbar_new) s`.
/// Charges one Hessian-vector product per sampled component when `s != 0`.
pub fn make_pair(
    problem: &ErmProblem,
    xbar_new: &[f64],
    xbar_old: &[f64],
    hess_batch: &[usize],
    meter: &mut DataPassMeter,
) -> PairOutcome {
    let s = sub(xbar_new, xbar_old);
    if norm_sq(&s) == 0.0 || hess_batch.is_empty() {
        return PairOutcome::Skip(SkipReason::ZeroStep);
    }
    let mut y = vec![0.0; s.len()];
    for &i in hess_batch {
        problem.hvp_accumulate(i, xbar_new, &s, 1.0, &mut y);
    }
    let bh = hess_batch.len() as f64;
    for v in &mut y {
        *v /= bh;
    }
    meter.hvp_evals += hess_batch.len() as u64;
    CorrectionPair::check(s, y)
}

/// Ring of the most recent correction pairs, oldest first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LbfgsMemory {
    dim: usize,
    capacity: usize,
    pairs: VecDeque<CorrectionPair>,
    inserted: usize,
}

impl LbfgsMemory {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            dim,
            capacity: capacity.max(1),
            pairs: VecDeque::with_capacity(capacity.max(1)),
            inserted: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of stored pairs, `min(inserted, capacity)`.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Total pairs ever inserted.
    pub fn inserted(&self) -> usize {
        self.inserted
    }

    pub fn pairs(&self) -> impl Iterator<Item = &CorrectionPair> {
        self.pairs.iter()
    }

    pub fn newest(&self) -> Option<&CorrectionPair> {
        self.pairs.back()
    }

    pub fn push(&mut self, pair: CorrectionPair) {
        debug_assert_eq!(pair.s.len(), self.dim);
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(pair);
        self.inserted += 1;
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Scale `s^T y / ||y||^2` of the newest pair, or 1 when empty.
    pub fn initial_scale(&self) -> f64 {
        self.newest().map_or(1.0, |p| p.sy / p.yy)
    }

    /// `H v` by the two-loop recursion in `O(len * d)`.
    pub fn two_loop(&self, v: &[f64]) -> Vec<f64> {
        let mut q = v.to_vec();
        if self.pairs.is_empty() {
            return q;
        }
        let mut alpha = vec![0.0; self.pairs.len()];
        for (k, p) in self.pairs.iter().enumerate().rev() {
            let a = dot(&p.s, &q) / p.sy;
            alpha[k] = a;
            axpy(-a, &p.y, &mut q);
        }
        let gamma = self.initial_scale();
        for qi in &mut q {
            *qi *= gamma;
        }
        for (k, p) in self.pairs.iter().enumerate() {
            let beta = dot(&p.y, &q) / p.sy;
            axpy(alpha[k] - beta, &p.s, &mut q);
        }
        q
    }

    /// Explicit `H` from the product-form update
    /// `H <- (I - rho y s^T)^T H (I - rho y s^T) + rho s s^T`, starting at the
    /// scaled identity.
    pub fn dense_reconstruct(&self) -> Result<DMatrix<f64>> {
        if self.dim > DENSE_LIMIT {
            return Err(Error::TooLarge {
                dim: self.dim,
                limit: DENSE_LIMIT,
            });
        }
        let d = self.dim;
        let mut h = DMatrix::<f64>::identity(d, d) * self.initial_scale();
        for p in &self.pairs {
            let s = nalgebra::DVector::from_column_slice(&p.s);
            let y = nalgebra::DVector::from_column_slice(&p.y);
            let rho = 1.0 / p.sy;
            let v = DMatrix::<f64>::identity(d, d) - (&y * s.transpose()) * rho;
            h = v.transpose() * &h * &v + (&s * s.transpose()) * rho;
        }
        Ok(h)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Trailing-window average over a stream of iterates.
#[derive(Debug, Clone)]
pub struct IterateAverager {
    window: usize,
    buf: VecDeque<Vec<f64>>,
    calls: usize,
}

impl IterateAverager {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            buf: VecDeque::with_capacity(window.max(1)),
            calls: 0,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Appends an iterate to the stream, dropping anything older than the window.
    pub fn record(&mut self, x: &[f64]) {
        if self.buf.len() == self.window {
            self.buf.pop_front();
        }
        self.buf.push_back(x.to_vec());
    }

    /// Mean of the iterates currently in the window, summed oldest first.
    pub fn window_mean(&self) -> Option<Vec<f64>> {
        let first = self.buf.front()?;
        let mut acc = vec![0.0; first.len()];
        for x in &self.buf {
            for (a, xi) in acc.iter_mut().zip(x) {
                *a += xi;
            }
        }
        let k = self.buf.len() as f64;
        for a in &mut acc {
            *a /= k;
        }
        Some(acc)
    }

    /// Records `x` and, on every `window`-th call, returns the mean of the
    /// last `window` iterates.
    pub fn push(&mut self, x: &[f64]) -> Option<Vec<f64>> {
        self.record(x);
        self.calls += 1;
        if self.calls.is_multiple_of(self.window) {
            self.window_mean()
        } else {
            None
        }
    }
}
