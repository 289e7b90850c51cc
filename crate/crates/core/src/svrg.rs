//! Variance-reduced minibatch gradients, anchor gradients (exact or
//! subsampled) and the data-pass meter.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{norm_sq, sub};
use crate::problem::ErmProblem;
use crate::sampling::{sample_with_replacement, sample_without_replacement, Rng, WeightedDist};

/// Counts of component accesses. One gradient or one Hessian-vector
/// product of a single component counts as one access.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPassMeter {
    pub grad_evals: u64,
    pub hvp_evals: u64,
}

impl DataPassMeter {
    pub fn grad_passes(&self, n: usize) -> f64 {
        self.grad_evals as f64 / n as f64
    }

    pub fn hvp_passes(&self, n: usize) -> f64 {
        self.hvp_evals as f64 / n as f64
    }

    /// Gradient and HVP accesses combined, over `n`.
    pub fn passes(&self, n: usize) -> f64 {
        (self.grad_evals + self.hvp_evals) as f64 / n as f64
    }
}

/// Reference point and gradient used by every inner step of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub x: Vec<f64>,
    pub grad: Vec<f64>,
    /// Exact objective at `x`, known only for exact anchors.
    pub value: Option<f64>,
    pub exact: bool,
    /// Number of components used for `grad`.
    pub size: usize,
}

/// Anchor sizes `clamp(round(zeta * growth^s), 1, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSchedule {
    pub zeta: f64,
    pub growth: f64,
    pub n: usize,
}

impl AnchorSchedule {
    pub fn new(zeta: f64, growth: f64, n: usize) -> Result<Self> {
        if !(zeta > 0.0) || !zeta.is_finite() {
            return Err(invalid(format!("zeta = {zeta} must be positive")));
        }
        if !(growth > 1.0) || !growth.is_finite() {
            return Err(invalid(format!("growth = {growth} must exceed 1")));
        }
        if n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        Ok(Self { zeta, growth, n })
    }

    /// `zeta = n / 3^8`, `growth = 3`: full gradients from epoch 8 on.
    pub fn standard(n: usize) -> Result<Self> {
        Self::new(n as f64 / 3f64.powi(8), 3.0, n)
    }

    pub fn size(&self, epoch: usize) -> usize {
        let raw = self.zeta * self.growth.powf(epoch as f64);
        if !raw.is_finite() || raw >= self.n as f64 {
            return self.n;
        }
        (raw.round() as usize).clamp(1, self.n)
    }
}

/// Exact anchor from an already computed full value and gradient.
/// Charges `n` gradient evaluations.
pub fn exact_anchor_from(
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    n: usize,
    meter: &mut DataPassMeter,
) -> Anchor {
    meter.grad_evals += n as u64;
    Anchor {
        x,
        grad,
        value: Some(value),
        exact: true,
        size: n,
    }
}

pub fn make_exact_anchor(problem: &ErmProblem, x: &[f64], meter: &mut DataPassMeter) -> Result<Anchor> {
    let (value, grad) = problem.full_value_grad(x)?;
    Ok(exact_anchor_from(x.to_vec(), value, grad, problem.n(), meter))
}

/// Anchor gradient averaged over a uniform subset of size
/// `schedule.size(epoch)` drawn without replacement. A full-size subset
/// produces the exact anchor.
pub fn make_subsampled_anchor(
    problem: &ErmProblem,
    x: &[f64],
    epoch: usize,
    schedule: &AnchorSchedule,
    rng: &mut Rng,
    meter: &mut DataPassMeter,
) -> Result<Anchor> {
    if schedule.n != problem.n() {
        return Err(invalid(format!(
            "schedule built for n = {} but problem has n = {}",
            schedule.n,
            problem.n()
        )));
    }
    let size = schedule.size(epoch);
    if size == problem.n() {
        return make_exact_anchor(problem, x, meter);
    }
    let subset = sample_without_replacement(problem.n(), size, rng)?;
    let d = problem.dim();
    let mut sum = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    for &i in &subset {
        problem.component_grad_into(i, x, &mut scratch);
        for (s, g) in sum.iter_mut().zip(&scratch) {
            *s += g;
        }
    }
    for s in &mut sum {
        *s /= size as f64;
    }
    meter.grad_evals += size as u64;
    Ok(Anchor {
        x: x.to_vec(),
        grad: sum,
        value: None,
        exact: false,
        size,
    })
}

/// `(1/b) sum_{i in batch} grad f_i(x) / (n p_i)`.
pub fn minibatch_grad(problem: &ErmProblem, x: &[f64], batch: &[usize], dist: &WeightedDist) -> Vec<f64> {
    let d = problem.dim();
    let mut out = vec![0.0; d];
    if batch.is_empty() {
        return out;
    }
    let n = problem.n() as f64;
    let mut scratch = vec![0.0; d];
    for &i in batch {
        problem.component_grad_into(i, x, &mut scratch);
        let w = 1.0 / (n * dist.prob(i));
        for (o, g) in out.iter_mut().zip(&scratch) {
            *o += w * g;
        }
    }
    let b = batch.len() as f64;
    for o in &mut out {
        *o /= b;
    }
    out
}

/// `v = grad f_B(x) - grad f_B(anchor.x) + anchor.grad`. Charges `2b`
/// gradient evaluations.
pub fn vr_gradient(
    problem: &ErmProblem,
    x: &[f64],
    anchor: &Anchor,
    batch: &[usize],
    dist: &WeightedDist,
    meter: &mut DataPassMeter,
) -> Result<Vec<f64>> {
    let d = problem.dim();
    for len in [x.len(), anchor.x.len(), anchor.grad.len()] {
        if len != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: len,
            });
        }
    }
    if dist.len() != problem.n() {
        return Err(Error::DimensionMismatch {
            expected: problem.n(),
            got: dist.len(),
        });
    }
    let at_x = minibatch_grad(problem, x, batch, dist);
    let at_anchor = minibatch_grad(problem, &anchor.x, batch, dist);
    meter.grad_evals += 2 * batch.len() as u64;
    Ok(at_x
        .iter()
        .zip(&at_anchor)
        .zip(&anchor.grad)
        .map(|((a, b), g)| a - b + g)
        .collect())
}

/// Outcome of a Monte-Carlo check of the minibatch variance bound
/// `E||v - grad f(x)||^2 <= (4 l_eff / b)(f(x) - f* + f(anchor) - f*)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub empirical: f64,
    pub bound: f64,
    /// Standard error of `empirical`.
    pub std_err: f64,
    /// `max_i L_i / (n p_i)`; equals the mean smoothness constant under
    /// smoothness-proportional sampling.
    pub l_eff: f64,
    pub trials: usize,
    pub pass: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn variance_bound_check(
    problem: &ErmProblem,
    x: &[f64],
    anchor_x: &[f64],
    f_star: f64,
    b: usize,
    dist: &WeightedDist,
    trials: usize,
    rng: &mut Rng,
) -> Result<VarianceReport> {
    if b == 0 || trials == 0 {
        return Err(invalid("batch size and trial count must be positive"));
    }
    let mut meter = DataPassMeter::default();
    let anchor = make_exact_anchor(problem, anchor_x, &mut meter)?;
    let (fx, gx) = problem.full_value_grad(x)?;
    let fa = anchor.value.expect("exact anchor has a value");
    let n = problem.n() as f64;
    let l_eff = problem
        .lipschitz()
        .iter()
        .enumerate()
        .map(|(i, l)| l / (n * dist.prob(i)))
        .fold(0.0, f64::max);
    let gap = (fx - f_star).max(0.0) + (fa - f_star).max(0.0);
    let bound = 4.0 * l_eff / b as f64 * gap;

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let batch = sample_with_replacement(dist, b, rng);
        let v = vr_gradient(problem, x, &anchor, &batch, dist, &mut meter)?;
        let e = norm_sq(&sub(&v, &gx));
        sum += e;
        sum_sq += e * e;
    }
    let t = trials as f64;
    let empirical = sum / t;
    let var = (sum_sq / t - empirical * empirical).max(0.0);
    let std_err = (var / t).sqrt();
    let pass = empirical <= bound * (1.0 + 3.0 / t.sqrt());
    Ok(VarianceReport {
        empirical,
        bound,
        std_err,
        l_eff,
        trials,
        pass,
    })
}

/// Smallest anchor size that keeps the anchor error below the contraction
/// target at epoch `s`: `n S^2 alpha / (S^2 alpha + (n-1) xi^2 rho_bar^(2s))`.
pub fn anchor_size_floor(n: usize, epoch: usize, s_bound: f64, alpha: f64, xi: f64, rho_bar: f64) -> f64 {
    let n = n as f64;
    let num = n * s_bound * s_bound * alpha;
    let den = s_bound * s_bound * alpha + (n - 1.0) * xi * xi * rho_bar.powf(2.0 * epoch as f64);
    if den > 0.0 {
        num / den
    } else {
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthesize, Conditioning, SynthSpec, Task};
    use crate::problem::Loss;
    use crate::sampling::{build_lipschitz_dist, streams};
    use rand::Rng as _;

    fn small_problem(n: usize, d: usize, loss: Loss, seed: u64) -> ErmProblem {
        let task = match loss {
            Loss::Logistic => Task::Classification,
            Loss::Ridge => Task::Regression,
        };
        let ds = synthesize(&SynthSpec {
            n,
            d,
            density: 0.6,
            conditioning: Conditioning::Well,
            task,
            seed,
        })
        .unwrap();
        ErmProblem::new(ds, loss, 0.05).unwrap()
    }

    fn rand_x(d: usize, rng: &mut Rng) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn cancellation_at_anchor() {
        let p = small_problem(9, 4, Loss::Logistic, 1);
        let dist = build_lipschitz_dist(&p).unwrap();
        let mut rng = Rng::new(1, streams::MINIBATCH);
        let mut meter = DataPassMeter::default();
        let x = rand_x(4, &mut rng);
        let anchor = make_exact_anchor(&p, &x, &mut meter).unwrap();
        assert_eq!(meter.grad_evals, 9);
        let batch = sample_with_replacement(&dist, 5, &mut rng);
        let v = vr_gradient(&p, &x, &anchor, &batch, &dist, &mut meter).unwrap();
        assert_eq!(v, anchor.grad);
        assert_eq!(meter.grad_evals, 19);
    }

    #[test]
    fn single_uniform_draw() {
        let p = small_problem(6, 3, Loss::Ridge, 2);
        let dist = WeightedDist::uniform(6).unwrap();
        let mut rng = Rng::new(2, "x");
        let mut meter = DataPassMeter::default();
        let x = rand_x(3, &mut rng);
        let xa = rand_x(3, &mut rng);
        let anchor = make_exact_anchor(&p, &xa, &mut meter).unwrap();
        let v = vr_gradient(&p, &x, &anchor, &[4], &dist, &mut meter).unwrap();
        let (_, gx) = p.component_value_grad(4, &x).unwrap();
        let (_, ga) = p.component_value_grad(4, &xa).unwrap();
        for j in 0..3 {
            let want = gx[j] - ga[j] + anchor.grad[j];
            assert!((v[j] - want).abs() <= 1e-15 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn exact_anchor_matches_loop() {
        let p = small_problem(7, 5, Loss::Logistic, 3);
        let mut rng = Rng::new(3, "x");
        let x = rand_x(5, &mut rng);
        let mut meter = DataPassMeter::default();
        let a = make_exact_anchor(&p, &x, &mut meter).unwrap();
        let mut sum = [0.0; 5];
        for i in 0..7 {
            let (_, g) = p.component_value_grad(i, &x).unwrap();
            for j in 0..5 {
                sum[j] += g[j];
            }
        }
        let want: Vec<f64> = sum.iter().map(|s| s / 7.0).collect();
        assert_eq!(a.grad, want);
        assert!(a.exact && a.size == 7);
    }

    #[test]
    fn schedule_sizes() {
        let s = AnchorSchedule::standard(6561 * 2).unwrap();
        assert_eq!(s.size(0), 2);
        assert_eq!(s.size(8), 6561 * 2);
        assert_eq!(s.size(100), 6561 * 2);
        let s = AnchorSchedule::standard(100).unwrap();
        assert_eq!(s.size(0), 1);
        for e in 0..20 {
            assert!(s.size(e + 1) >= s.size(e));
        }
        assert!(AnchorSchedule::new(0.0, 3.0, 10).is_err());
        assert!(AnchorSchedule::new(1.0, 1.0, 10).is_err());
    }

    #[test]
    fn full_size_subsample_is_exact() {
        let p = small_problem(50, 6, Loss::Logistic, 4);
        let sched = AnchorSchedule::new(1.0, 3.0, 50).unwrap();
        let mut rng = Rng::new(4, streams::ANCHOR);
        let x = rand_x(6, &mut rng);
        let mut m1 = DataPassMeter::default();
        let mut m2 = DataPassMeter::default();
        let sub = make_subsampled_anchor(&p, &x, 10, &sched, &mut rng, &mut m1).unwrap();
        let exact = make_exact_anchor(&p, &x, &mut m2).unwrap();
        assert_eq!(sub, exact);
        assert_eq!(m1, m2);
        let small = make_subsampled_anchor(&p, &x, 1, &sched, &mut rng, &mut m1).unwrap();
        assert_eq!(small.size, 3);
        assert!(!small.exact);
        assert_eq!(m1.grad_evals, 53);
    }

    #[test]
    fn subsampled_anchor_error_moment() {
        let p = small_problem(30, 5, Loss::Logistic, 5);
        let mut rng = Rng::new(5, streams::ANCHOR);
        let x = rand_x(5, &mut rng);
        let (_, g) = p.full_value_grad(&x).unwrap();
        let alpha = (0..30)
            .map(|i| norm_sq(&p.component_value_grad(i, &x).unwrap().1))
            .sum::<f64>()
            / 30.0;
        let sched = AnchorSchedule::new(8.0, 2.0, 30).unwrap();
        let bt = sched.size(0);
        let trials = 20_000;
        let mut meter = DataPassMeter::default();
        let errs: Vec<f64> = (0..trials)
            .map(|_| {
                let a = make_subsampled_anchor(&p, &x, 0, &sched, &mut rng, &mut meter).unwrap();
                norm_sq(&sub(&a.grad, &g))
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / trials as f64;
        let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / trials as f64).sqrt();
        let bound = (30 - bt) as f64 / (bt as f64 * 29.0) * alpha;
        assert!(mean <= bound + 3.0 * sd / (trials as f64).sqrt(), "{mean} vs {bound}");
    }

    #[test]
    fn variance_zero_at_optimum_point() {
        let p = small_problem(10, 3, Loss::Ridge, 6);
        let x = vec![0.3, -0.2, 0.1];
        let f = p.full_value_grad(&x).unwrap().0;
        let dist = build_lipschitz_dist(&p).unwrap();
        let mut rng = Rng::new(6, "v");
        let r = variance_bound_check(&p, &x, &x, f, 2, &dist, 100, &mut rng).unwrap();
        assert_eq!(r.empirical, 0.0);
        assert_eq!(r.bound, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn floor_limits() {
        assert!((anchor_size_floor(100, 0, 1.0, 1.0, 0.0, 0.5) - 100.0).abs() < 1e-12);
        let f = anchor_size_floor(100, 3, 1.0, 1.0, 1.0, 0.5);
        assert!(f > 0.0 && f < 100.0);
    }
}
