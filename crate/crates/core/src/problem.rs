//! Regularized finite-sum objectives
//! `f(x) = (1/n) sum_i [ loss(a_i^T x, b_i) + (lambda/2) ||x||^2 ]`.

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Task};
use crate::error::{invalid, Error, Result};
use crate::linalg::{all_finite, norm_sq};

/// Per-example loss `l(t, b)` evaluated at the margin `t = a^T x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `log(1 + exp(-b t))`, labels in {-1, +1}.
    Logistic,
    /// `(t - b)^2`.
    Ridge,
}

impl Loss {
    /// Loss value, computed in overflow-safe form for the logistic case.
    pub fn value(self, t: f64, b: f64) -> f64 {
        match self {
            Loss::Logistic => {
                let z = b * t;
                (-z.abs()).exp().ln_1p() + (-z).max(0.0)
            }
            Loss::Ridge => (t - b) * (t - b),
        }
    }

    /// First derivative in `t`.
    pub fn d1(self, t: f64, b: f64) -> f64 {
        match self {
            Loss::Logistic => -b * sigmoid(-b * t),
            Loss::Ridge => 2.0 * (t - b),
        }
    }

    /// Second derivative in `t`.
    pub fn d2(self, t: f64, b: f64) -> f64 {
        match self {
            Loss::Logistic => {
                let z = b * t;
                sigmoid(z) * sigmoid(-z) * b * b
            }
            Loss::Ridge => 2.0,
        }
    }

    /// Upper bound on `d2` per unit `||a||^2`.
    fn curvature_bound(self) -> f64 {
        match self {
            Loss::Logistic => 0.25,
            Loss::Ridge => 2.0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sorted per-component constants and the averages built from them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureSummary {
    /// `mu_i` ascending.
    mu_sorted: Vec<f64>,
    /// `L_i` descending.
    l_sorted: Vec<f64>,
}

impl CurvatureSummary {
    pub fn new(mu: &[f64], l: &[f64]) -> Result<Self> {
        if mu.is_empty() || mu.len() != l.len() {
            return Err(invalid("constant lists must be nonempty and of equal length"));
        }
        if mu.iter().any(|&v| !(v > 0.0)) {
            return Err(invalid("strong-convexity constants must be positive"));
        }
        let mut mu_sorted = mu.to_vec();
        mu_sorted.sort_by(f64::total_cmp);
        let mut l_sorted = l.to_vec();
        l_sorted.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { mu_sorted, l_sorted })
    }

    pub fn n(&self) -> usize {
        self.mu_sorted.len()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.n(),
            });
        }
        Ok(())
    }

    /// Mean of the `k` smallest `mu_i`.
    pub fn mu_bar(&self, k: usize) -> Result<f64> {
        self.check_k(k)?;
        Ok(self.mu_sorted[..k].iter().sum::<f64>() / k as f64)
    }

    /// Mean of the `k` largest `L_i`.
    pub fn l_bar(&self, k: usize) -> Result<f64> {
        self.check_k(k)?;
        Ok(self.l_sorted[..k].iter().sum::<f64>() / k as f64)
    }

    pub fn kappa_k(&self, k: usize) -> Result<f64> {
        Ok(self.l_bar(k)? / self.mu_bar(k)?)
    }

    pub fn l_max(&self) -> f64 {
        self.l_sorted[0]
    }

    pub fn mu_min(&self) -> f64 {
        self.mu_sorted[0]
    }

    pub fn kappa_max(&self) -> f64 {
        self.l_max() / self.mu_min()
    }

    /// `kappa_n = L_bar / mu_bar` over all components.
    pub fn kappa(&self) -> f64 {
        self.kappa_k(self.n()).expect("n >= 1")
    }
}

/// Regularized empirical risk over a dataset.
#[derive(Debug, Clone)]
pub struct ErmProblem {
    data: Dataset,
    loss: Loss,
    lambda: f64,
    lipschitz: Vec<f64>,
}

impl ErmProblem {
    pub fn new(data: Dataset, loss: Loss, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("lambda = {lambda} must be finite and >= 0")));
        }
        if data.n() == 0 {
            return Err(Error::EmptyInput("dataset has no examples".into()));
        }
        if loss == Loss::Logistic && data.task() != Task::Classification {
            return Err(invalid("logistic loss needs classification labels"));
        }
        let lipschitz = data
            .rows()
            .iter()
            .map(|a| loss.curvature_bound() * a.norm_sq() + lambda)
            .collect();
        Ok(Self {
            data,
            loss,
            lambda,
            lipschitz,
        })
    }

    /// Uses `lambda = 1/n`.
    pub fn with_default_lambda(data: Dataset, loss: Loss) -> Result<Self> {
        let lambda = 1.0 / data.n().max(1) as f64;
        Self::new(data, loss, lambda)
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    /// Per-component smoothness constants `L_i`.
    pub fn lipschitz(&self) -> &[f64] {
        &self.lipschitz
    }

    /// Per-component strong-convexity constants `mu_i = lambda`.
    pub fn strong_convexity(&self) -> Vec<f64> {
        vec![self.lambda; self.n()]
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.n(),
            });
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Margin `a_i^T x`.
    pub fn margin(&self, i: usize, x: &[f64]) -> f64 {
        self.data.row(i).dot_dense(x)
    }

    /// Second derivative of the loss of component `i` at `x`.
    pub fn loss_curvature(&self, i: usize, x: &[f64]) -> f64 {
        self.loss.d2(self.margin(i, x), self.data.label(i))
    }

    pub fn component_value(&self, i: usize, x: &[f64]) -> Result<f64> {
        self.check_index(i)?;
        self.check_dim(x)?;
        Ok(self.component_value_unchecked(i, x))
    }

    fn component_value_unchecked(&self, i: usize, x: &[f64]) -> f64 {
        let t = self.margin(i, x);
        self.loss.value(t, self.data.label(i)) + 0.5 * self.lambda * norm_sq(x)
    }

    pub fn component_value_grad(&self, i: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_index(i)?;
        self.check_dim(x)?;
        let mut g = vec![0.0; self.dim()];
        let v = self.component_grad_into(i, x, &mut g);
        Ok((v, g))
    }

    /// Overwrites `out` with `grad f_i(x)` and returns `f_i(x)`.
    pub(crate) fn component_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) -> f64 {
        let a = self.data.row(i);
        let b = self.data.label(i);
        let t = a.dot_dense(x);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.lambda * xi;
        }
        a.axpy_into(self.loss.d1(t, b), out);
        self.loss.value(t, b) + 0.5 * self.lambda * norm_sq(x)
    }

    /// `grad^2 f_i(x) v` in `O(nnz(a_i) + d)`.
    pub fn component_hvp(&self, i: usize, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_index(i)?;
        self.check_dim(x)?;
        self.check_dim(v)?;
        let mut out = vec![0.0; self.dim()];
        self.hvp_accumulate(i, x, v, 1.0, &mut out);
        Ok(out)
    }

    /// `out += alpha * grad^2 f_i(x) v`.
    pub(crate) fn hvp_accumulate(&self, i: usize, x: &[f64], v: &[f64], alpha: f64, out: &mut [f64]) {
        let a = self.data.row(i);
        let c = self.loss_curvature(i, x) * a.dot_dense(v);
        for (o, vi) in out.iter_mut().zip(v) {
            *o += alpha * self.lambda * vi;
        }
        a.axpy_into(alpha * c, out);
    }

    /// Average value and gradient, accumulated component by component in
    /// index order and divided by `n` at the end.
    pub fn full_value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dim(x)?;
        let d = self.dim();
        let mut sum = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        let mut value = 0.0;
        for i in 0..self.n() {
            value += self.component_grad_into(i, x, &mut scratch);
            for (s, g) in sum.iter_mut().zip(&scratch) {
                *s += g;
            }
        }
        let n = self.n() as f64;
        for s in &mut sum {
            *s /= n;
        }
        let value = value / n;
        if !value.is_finite() || !all_finite(&sum) {
            return Err(Error::NonFinite("full gradient".into()));
        }
        Ok((value, sum))
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let data: f64 = (0..self.n())
            .map(|i| self.loss.value(self.margin(i, x), self.data.label(i)))
            .sum();
        Ok(data / self.n() as f64 + 0.5 * self.lambda * norm_sq(x))
    }

    pub fn curvature_summary(&self) -> Result<CurvatureSummary> {
        if !(self.lambda > 0.0) {
            return Err(Error::NotStronglyConvex(self.lambda));
        }
        CurvatureSummary::new(&self.strong_convexity(), &self.lipschitz)
    }
}
