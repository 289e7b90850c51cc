//! Desk-scale diagnostic suite: oracle equivalences, derivative checks,
//! the variance bound and spectral certification of the metric matrices.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blockhess::{
    bfgs_recursion_dense, build_partition, cg_solve, push_block_pairs, sample_block_batches, BlockMemory,
    CompactBfgs,
};
use crate::dataio::{reference_optimum, synthesize, Conditioning, Dataset, SynthSpec, Task};
use crate::error::Result;
use crate::lbfgs::{CorrectionPair, LbfgsMemory, PairOutcome};
use crate::linalg::{axpy, dot, norm, sub};
use crate::problem::{ErmProblem, Loss};
use crate::sampling::{build_lipschitz_dist, sample_without_replacement, Rng};
use crate::solver::{run, run_with_observer, OuterOption, SolverConfig, SolverEvent};
use crate::svrg::{make_exact_anchor, variance_bound_check, vr_gradient, DataPassMeter};
use crate::theory::{certify_spectra, spectral_bounds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckLevel {
    Fast,
    Full,
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub level: CheckLevel,
    pub seed: u64,
    /// Admit correction pairs that the curvature guard would reject.
    /// Test hook for the negative path of the spectra check.
    pub bypass_curvature_guard: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            level: CheckLevel::Fast,
            seed: 0,
            bypass_curvature_guard: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub elapsed_ms: f64,
}

type CheckFn = fn(&CheckOptions) -> Result<(bool, String)>;

const CHECKS: [(&str, CheckFn); 11] = [
    ("two_loop_oracle", two_loop_oracle),
    ("compact_vs_recursion", compact_vs_recursion),
    ("spectra", spectra),
    ("variance_bound", variance_bound),
    ("unbiasedness", unbiasedness),
    ("finite_differences", finite_differences),
    ("cg_dense", cg_dense),
    ("option_algebra", option_algebra),
    ("reference_normal_equations", reference_normal_equations),
    ("linear_convergence", linear_convergence),
    ("determinism", determinism),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check; errors inside a check count as failures.
pub fn run_checks(opts: &CheckOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (pass, detail) = match f(opts) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name: name.to_string(),
                pass,
                detail,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect()
}

fn reps(opts: &CheckOptions, fast: usize, full: usize) -> usize {
    match opts.level {
        CheckLevel::Fast => fast,
        CheckLevel::Full => full,
    }
}

fn normal_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Pairs `(s, A s)` for a random SPD `A = Q^T Q + 0.1 I`.
fn spd_pairs(rng: &mut Rng, d: usize, count: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let q = DMatrix::from_fn(d, d, |_, _| -> f64 { StandardNormal.sample(rng) });
    let a = q.transpose() * q + DMatrix::identity(d, d) * 0.1;
    (0..count)
        .map(|_| {
            let s = DVector::from_vec(normal_vec(rng, d));
            let y = &a * &s;
            (s.as_slice().to_vec(), y.as_slice().to_vec())
        })
        .collect()
}

fn small_problem(n: usize, d: usize, loss: Loss, lambda: f64, seed: u64) -> Result<ErmProblem> {
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
    })?;
    ErmProblem::new(ds, loss, lambda)
}

fn two_loop_oracle(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = Rng::new(opts.seed, "check-two-loop");
    let mut worst = 0.0f64;
    for _ in 0..reps(opts, 50, 200) {
        let d = rng.random_range(1..=16);
        let cap = rng.random_range(1..=8);
        let mut mem = LbfgsMemory::new(d, cap);
        let count = rng.random_range(0..=cap + 2);
        for (s, y) in spd_pairs(&mut rng, d, count) {
            if let PairOutcome::Accepted(p) = CorrectionPair::check(s, y) {
                mem.push(p);
            }
        }
        let v = normal_vec(&mut rng, d);
        let h = mem.dense_reconstruct()?;
        let hv = &h * DVector::from_column_slice(&v);
        let err = norm(&sub(&mem.two_loop(&v), hv.as_slice())) / norm(&v);
        worst = worst.max(err);
    }
    Ok((worst <= 1e-9, format!("max relative error {worst:.2e} (limit 1e-9)")))
}

fn compact_vs_recursion(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = Rng::new(opts.seed, "check-compact");
    let mut worst = 0.0f64;
    for _ in 0..reps(opts, 30, 100) {
        let d = rng.random_range(1..=12);
        let count = rng.random_range(1..=6);
        let pairs = spd_pairs(&mut rng, d, count);
        let compact = CompactBfgs::from_pairs(&pairs)?.to_dense();
        let direct = bfgs_recursion_dense(&pairs)?;
        worst = worst.max((&compact - &direct).norm() / direct.norm());
    }
    Ok((worst <= 1e-8, format!("max relative error {worst:.2e} (limit 1e-8)")))
}

fn admit(mem: &mut LbfgsMemory, s: Vec<f64>, y: Vec<f64>, bypass: bool) -> bool {
    if bypass {
        mem.push(CorrectionPair::unchecked(s, y));
        return true;
    }
    match CorrectionPair::check(s, y) {
        PairOutcome::Accepted(p) => {
            mem.push(p);
            true
        }
        PairOutcome::Skip(_) => false,
    }
}

/// Solver snapshots plus a candidate stream in which every third pair has
/// its curvature sign flipped; the guard must keep all of them in band.
fn spectra(opts: &CheckOptions) -> Result<(bool, String)> {
    let (n, d, memory) = (60, 10, 5);
    let p = small_problem(n, d, Loss::Logistic, 0.1, opts.seed)?;
    let mut config = SolverConfig::defaults_for(n);
    config.memory = memory;
    config.epsilon = 0.0;
    config.max_epochs = 4;
    let summary = p.curvature_summary()?;
    let (gamma, big_gamma) = spectral_bounds(memory, summary.mu_bar(config.b_h)?, summary.l_bar(config.b_h)?)?;

    let mut snapshots = Vec::new();
    for seed in 0..reps(opts, 3, 10) as u64 {
        config.seed = opts.seed.wrapping_add(seed);
        run_with_observer(&p, &config, None, |ev| {
            if let SolverEvent::LbfgsUpdated(mem) = ev {
                snapshots.push(mem.clone());
            }
        })?;
    }
    let from_runs = snapshots.len();

    let mut rng = Rng::new(opts.seed, "check-spectra");
    let mut mem = LbfgsMemory::new(d, memory);
    let mut rejected = 0;
    for r in 0..30 {
        let x = normal_vec(&mut rng, d);
        let s = normal_vec(&mut rng, d);
        let batch = sample_without_replacement(n, config.b_h, &mut rng)?;
        let mut y = vec![0.0; d];
        for &i in &batch {
            axpy(1.0 / batch.len() as f64, &p.component_hvp(i, &x, &s)?, &mut y);
        }
        if r % 3 == 2 {
            y.iter_mut().for_each(|v| *v = -*v);
        }
        if admit(&mut mem, s, y, opts.bypass_curvature_guard) {
            snapshots.push(mem.clone());
        } else {
            rejected += 1;
        }
    }
    let report = certify_spectra(&snapshots, gamma, big_gamma)?;
    Ok((
        report.pass,
        format!(
            "{} snapshots ({} from runs, {} candidates rejected), eigenvalues in [{:.3e}, {:.3e}], band [{:.3e}, {:.3e}], {} outside",
            report.checked,
            from_runs,
            rejected,
            report.min_eigenvalue,
            report.max_eigenvalue,
            gamma,
            big_gamma,
            report.failures.len()
        ),
    ))
}

fn variance_bound(opts: &CheckOptions) -> Result<(bool, String)> {
    let p = small_problem(50, 10, Loss::Logistic, 0.02, opts.seed)?;
    let r = reference_optimum(&p, 1e-10)?;
    let dist = build_lipschitz_dist(&p)?;
    let mut rng = Rng::new(opts.seed, "check-variance");
    let draws = reps(opts, 10_000, 100_000);
    let mut failures = 0;
    let mut worst_ratio = 0.0f64;
    let points = reps(opts, 4, 20);
    for _ in 0..points {
        let x: Vec<f64> = normal_vec(&mut rng, 10).iter().map(|v| 0.5 * v).collect();
        let a: Vec<f64> = normal_vec(&mut rng, 10).iter().map(|v| 0.5 * v).collect();
        for b in [1, 5, 25] {
            let rep = variance_bound_check(&p, &x, &a, r.f_star, b, &dist, draws, &mut rng)?;
            worst_ratio = worst_ratio.max(rep.empirical / rep.bound);
            let slack = 3.0 * rep.std_err;
            if rep.empirical > rep.bound + slack {
                failures += 1;
            }
        }
    }
    Ok((
        failures == 0,
        format!(
            "{} cases, {draws} draws each, max empirical/bound {worst_ratio:.3}, {failures} violations",
            points * 3
        ),
    ))
}

fn unbiasedness(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(opts.seed, "check-unbiased");
    for case in 0..reps(opts, 4, 12) {
        let n = 3 + case % 6;
        let loss = if case % 2 == 0 { Loss::Logistic } else { Loss::Ridge };
        let p = small_problem(n, 4, loss, 0.1, opts.seed + case as u64)?;
        let dist = build_lipschitz_dist(&p)?;
        let x = normal_vec(&mut rng, 4);
        let a = normal_vec(&mut rng, 4);
        let mut meter = DataPassMeter::default();
        let anchor = make_exact_anchor(&p, &a, &mut meter)?;
        let (_, g) = p.full_value_grad(&x)?;
        for b in 1..=2usize {
            let mut mean = vec![0.0; 4];
            for flat in 0..n.pow(b as u32) {
                let batch: Vec<usize> = (0..b).map(|k| flat / n.pow(k as u32) % n).collect();
                let prob: f64 = batch.iter().map(|&i| dist.prob(i)).product();
                let v = vr_gradient(&p, &x, &anchor, &batch, &dist, &mut meter)?;
                axpy(prob, &v, &mut mean);
            }
            worst = worst.max(norm(&sub(&mean, &g)) / norm(&g).max(1e-300));
        }
    }
    Ok((worst <= 1e-12, format!("max relative deviation {worst:.2e} (limit 1e-12)")))
}

fn finite_differences(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = Rng::new(opts.seed, "check-fd");
    let (mut gworst, mut hworst) = (0.0f64, 0.0f64);
    for case in 0..reps(opts, 10, 50) {
        for loss in [Loss::Logistic, Loss::Ridge] {
            let p = small_problem(8, 6, loss, 0.05, opts.seed + case as u64)?;
            let i = rng.random_range(0..8);
            let x = normal_vec(&mut rng, 6);
            let v = normal_vec(&mut rng, 6);
            let (_, g) = p.component_value_grad(i, &x)?;
            let hv = p.component_hvp(i, &x, &v)?;
            let h = 1e-6;
            let fd_g: Vec<f64> = (0..6)
                .map(|j| {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[j] += h;
                    xm[j] -= h;
                    Ok((p.component_value(i, &xp)? - p.component_value(i, &xm)?) / (2.0 * h))
                })
                .collect::<Result<_>>()?;
            let mut xp = x.clone();
            let mut xm = x.clone();
            axpy(h, &v, &mut xp);
            axpy(-h, &v, &mut xm);
            let fd_h: Vec<f64> = sub(&p.component_value_grad(i, &xp)?.1, &p.component_value_grad(i, &xm)?.1)
                .iter()
                .map(|d| d / (2.0 * h))
                .collect();
            gworst = gworst.max(norm(&sub(&g, &fd_g)) / norm(&g).max(1e-8));
            hworst = hworst.max(norm(&sub(&hv, &fd_h)) / norm(&hv).max(1e-8));
        }
    }
    Ok((
        gworst <= 1e-5 && hworst <= 1e-4,
        format!("gradient {gworst:.2e} (limit 1e-5), hvp {hworst:.2e} (limit 1e-4)"),
    ))
}

fn cg_dense(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = Rng::new(opts.seed, "check-cg");
    let mut worst = 0.0f64;
    for case in 0..reps(opts, 5, 20) {
        let d = 4 + case % 7;
        let n = 24;
        let p = small_problem(n, d, Loss::Logistic, 0.1, opts.seed + case as u64)?;
        let part = build_partition(p.dataset(), 3, &mut rng)?;
        let mut mem = BlockMemory::new(&part, &p, 4);
        let mut meter = DataPassMeter::default();
        let mut prev = vec![0.0; d];
        for _ in 0..5 {
            let next = normal_vec(&mut rng, d);
            let batches = sample_block_batches(&part, 12, &mut rng)?;
            push_block_pairs(&mut mem, &part, &p, &next, &prev, &batches, &mut meter);
            prev = next;
        }
        let v = normal_vec(&mut rng, d);
        let rhs: Vec<f64> = v.iter().map(|x| -x).collect();
        let sol = cg_solve(&mem, &part, &rhs, 1e-12, 10 * d)?;
        let dense = mem.dense_assembly(&part);
        let Some(want) = dense.lu().solve(&DVector::from_column_slice(&rhs)) else {
            return Ok((false, "assembled operator is singular".into()));
        };
        worst = worst.max(norm(&sub(&sol.x, want.as_slice())) / want.norm());
    }
    Ok((worst <= 1e-6, format!("max relative error {worst:.2e} (limit 1e-6)")))
}

fn option_algebra(opts: &CheckOptions) -> Result<(bool, String)> {
    let p = small_problem(40, 6, Loss::Logistic, 0.05, opts.seed)?;
    let mut c = SolverConfig::defaults_for(40);
    c.epsilon = 0.0;
    c.max_epochs = 3;
    c.seed = opts.seed;
    c.outer = OuterOption::UniformAverage;
    let ii = run(&p, &c, None)?;
    c.outer = OuterOption::GeometricAverage;
    c.beta = 1.0;
    let iv = run(&p, &c, None)?;
    let same = ii.x == iv.x;
    Ok((same, format!("option IV with beta = 1 {} option II", if same { "equals" } else { "differs from" })))
}

fn reference_normal_equations(opts: &CheckOptions) -> Result<(bool, String)> {
    let p = small_problem(20, 5, Loss::Ridge, 0.05, opts.seed)?;
    let r = reference_optimum(&p, 1e-12)?;
    let want = normal_equations(p.dataset(), p.lambda());
    let err = norm(&sub(&r.x_star, &want)) / norm(&want).max(1e-300);
    Ok((err <= 1e-8, format!("relative error {err:.2e} (limit 1e-8)")))
}

fn normal_equations(data: &Dataset, lambda: f64) -> Vec<f64> {
    let (n, d) = (data.n(), data.dim());
    let mut a = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        for (j, v) in data.row(i).iter() {
            a[(i, j)] = v;
        }
    }
    let b = DVector::from_column_slice(data.labels());
    let lhs = a.transpose() * &a * 2.0 + DMatrix::identity(d, d) * (n as f64 * lambda);
    let rhs = a.transpose() * b * 2.0;
    lhs.lu().solve(&rhs).map(|x| x.as_slice().to_vec()).unwrap_or_default()
}

/// A well-tuned ridge run shrinks the suboptimality by six orders of
/// magnitude with a near-linear log trace.
fn linear_convergence(opts: &CheckOptions) -> Result<(bool, String)> {
    let p = small_problem(200, 20, Loss::Ridge, 1.0 / 200.0, opts.seed)?;
    let r = reference_optimum(&p, 1e-11)?;
    let mut c = SolverConfig::defaults_for(200);
    c.eta = 0.1;
    c.epsilon = 0.0;
    c.max_epochs = 25;
    c.seed = opts.seed;
    let out = run(&p, &c, Some(r.f_star))?;
    let subs: Vec<f64> = out.trace.records.iter().filter_map(|r| r.subopt).collect();
    let first = subs[0];
    let last = *subs.last().expect("nonempty trace");
    let pts: Vec<(f64, f64)> = subs
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > 1e-13)
        .map(|(k, s)| (k as f64, s.log10()))
        .collect();
    let r2 = r_squared(&pts);
    Ok((
        last <= 1e-6 * first && r2 >= 0.9,
        format!("subopt {first:.2e} -> {last:.2e}, log-linear R^2 {r2:.3}"),
    ))
}

/// Coefficient of determination of the least-squares line through `pts`.
pub fn r_squared(pts: &[(f64, f64)]) -> f64 {
    let k = pts.len() as f64;
    if pts.len() < 3 {
        return 0.0;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

fn determinism(opts: &CheckOptions) -> Result<(bool, String)> {
    let p = small_problem(50, 8, Loss::Logistic, 0.02, opts.seed)?;
    let mut c = SolverConfig::defaults_for(50);
    c.epsilon = 0.0;
    c.max_epochs = 3;
    c.seed = opts.seed;
    let a = run(&p, &c, None)?;
    let b = run(&p, &c, None)?;
    let fa: Vec<f64> = a.trace.records.iter().map(|r| r.f).collect();
    let fb: Vec<f64> = b.trace.records.iter().map(|r| r.f).collect();
    let same = a.x == b.x && fa == fb && dot(&a.x, &a.x) == dot(&b.x, &b.x);
    Ok((same, format!("two runs with seed {} {}", opts.seed, if same { "agree bitwise" } else { "differ" })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_passes() {
        let results = run_checks(&CheckOptions::default());
        for r in &results {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
        assert_eq!(results.len(), check_names().len());
    }

    #[test]
    fn guard_bypass_fails_spectra_only_there() {
        let opts = CheckOptions {
            bypass_curvature_guard: true,
            ..CheckOptions::default()
        };
        let (pass, detail) = spectra(&opts).unwrap();
        assert!(!pass, "{detail}");
        assert!(two_loop_oracle(&opts).unwrap().0);
    }

    #[test]
    fn r_squared_of_a_line_is_one() {
        let pts: Vec<(f64, f64)> = (0..5).map(|k| (k as f64, 2.0 - 0.5 * k as f64)).collect();
        assert!((r_squared(&pts) - 1.0).abs() < 1e-12);
    }
}
