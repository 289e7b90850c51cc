use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lbfgs::{CorrectionPair, LbfgsMemory, PairOutcome};
use crate::linalg::{axpy, dot, norm, sub};
use crate::problem::ErmProblem;

/// High-accuracy minimizer used as ground truth for suboptimality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub grad_norm: f64,
    pub tolerance: f64,
}

impl ReferenceSolution {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl ReferenceOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            max_iter: 10_000,
            memory: 10,
        }
    }
}

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MIN_STEP: f64 = 1e-20;

/// Full-batch L-BFGS from the origin until `||grad f|| <= tolerance`.
pub fn reference_optimum(problem: &ErmProblem, tolerance: f64) -> Result<ReferenceSolution> {
    let x0 = vec![0.0; problem.dim()];
    reference_optimum_from(problem, &x0, &ReferenceOptions::with_tolerance(tolerance)).map(|(r, _)| r)
}

/// Full-batch L-BFGS with Armijo backtracking. Returns the solution and the
/// number of steps taken.
pub fn reference_optimum_from(
    problem: &ErmProblem,
    x0: &[f64],
    opts: &ReferenceOptions,
) -> Result<(ReferenceSolution, usize)> {
    if !(problem.lambda() > 0.0) {
        return Err(Error::NotStronglyConvex(problem.lambda()));
    }
    if !(opts.tolerance > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let mut x = x0.to_vec();
    let (mut f, mut g) = problem.full_value_grad(&x)?;
    let mut gnorm = norm(&g);
    let mut best = gnorm;
    let mut mem = LbfgsMemory::new(problem.dim(), opts.memory);
    let mut iter = 0;

    while gnorm > opts.tolerance {
        if iter >= opts.max_iter {
            return Err(Error::IterationLimit {
                iterations: iter,
                best_grad_norm: best,
            });
        }
        let mut p: Vec<f64> = mem.two_loop(&g).iter().map(|v| -v).collect();
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            mem.clear();
            p = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut alpha = if mem.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut trial = x.clone();
        let step = loop {
            trial.copy_from_slice(&x);
            axpy(alpha, &p, &mut trial);
            let ft = problem.value(&trial)?;
            if ft.is_finite() && ft <= f + ARMIJO_C * alpha * slope {
                break Some(problem.full_value_grad(&trial)?);
            }
            // Near the optimum, f no longer resolves the decrease; accept a
            // step that keeps f within rounding and shrinks the gradient.
            if ft.is_finite() && ft <= f + 4.0 * f64::EPSILON * f.abs() {
                let (fv, gv) = problem.full_value_grad(&trial)?;
                if norm(&gv) < gnorm {
                    break Some((fv, gv));
                }
            }
            alpha *= BACKTRACK;
            if alpha < MIN_STEP {
                break None;
            }
        };
        let Some((f_new, g_new)) = step else {
            if mem.is_empty() {
                return Err(Error::IterationLimit {
                    iterations: iter,
                    best_grad_norm: best,
                });
            }
            mem.clear();
            iter += 1;
            continue;
        };
        let s = sub(&trial, &x);
        let y = sub(&g_new, &g);
        if let PairOutcome::Accepted(pair) = CorrectionPair::check(s, y) {
            mem.push(pair);
        }
        x.copy_from_slice(&trial);
        f = f_new;
        g = g_new;
        gnorm = norm(&g);
        best = best.min(gnorm);
        iter += 1;
    }

    Ok((
        ReferenceSolution {
            x_star: x,
            f_star: f,
            grad_norm: gnorm,
            tolerance: opts.tolerance,
        },
        iter,
    ))
}
