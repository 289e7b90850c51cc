//! The epoch loop: anchor gradient, preconditioned variance-reduced inner
//! steps, periodic curvature updates from averaged iterates, outer-iterate
//! selection and termination.

mod config;
mod outer;
mod trace;

pub use config::{AnchorMode, CurvatureMode, OuterOption, SamplingMode, SolverConfig};
pub use outer::{select_next_outer, should_terminate, OuterSelector};
pub use trace::{EpochRecord, Termination, Trace, CSV_COLUMNS};

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};

use crate::blockhess::{
    build_partition, cg_solve, push_block_pairs, sample_block_batches, BlockMemory, BlockPairOutcome,
    BlockPartition,
};
use crate::error::{Error, Result};
use crate::lbfgs::{make_pair, IterateAverager, LbfgsMemory, PairOutcome};
use crate::linalg::{all_finite, axpy, norm};
use crate::problem::ErmProblem;
use crate::sampling::{
    build_lipschitz_dist, sample_with_replacement, sample_without_replacement, streams, Rng, WeightedDist,
};
use crate::svrg::{exact_anchor_from, make_subsampled_anchor, vr_gradient, Anchor, AnchorSchedule, DataPassMeter};
use crate::theory::{TheoryParams, TheoryReport};

/// Objective values above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e10;

/// Progress notifications for callers that inspect intermediate state.
#[derive(Debug)]
pub enum SolverEvent<'a> {
    Epoch(&'a EpochRecord),
    /// The limited-memory state right after it changed, and once at the
    /// start while it is still empty.
    LbfgsUpdated(&'a LbfgsMemory),
    BlockUpdated(&'a BlockMemory, &'a BlockPartition),
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub x: Vec<f64>,
    pub trace: Trace,
}

pub fn run(problem: &ErmProblem, config: &SolverConfig, f_star: Option<f64>) -> Result<RunOutput> {
    run_with_observer(problem, config, f_star, |_| {})
}

/// Starting point: the origin, or Gaussian with standard deviation
/// `init_scale` drawn from the `init` stream.
pub fn initial_point(dim: usize, config: &SolverConfig) -> Vec<f64> {
    if config.init_scale == 0.0 {
        return vec![0.0; dim];
    }
    let mut rng = Rng::new(config.seed, streams::INIT);
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            config.init_scale * z
        })
        .collect()
}

/// Minibatch distribution selected by the configuration.
pub fn sampling_distribution(problem: &ErmProblem, mode: SamplingMode) -> Result<WeightedDist> {
    match mode {
        SamplingMode::Uniform => WeightedDist::uniform(problem.n()),
        SamplingMode::Lipschitz => build_lipschitz_dist(problem),
    }
}

/// Diagnostics for a configuration, or `None` when the problem is not
/// strongly convex.
pub fn theory_report(problem: &ErmProblem, config: &SolverConfig) -> Option<TheoryReport> {
    let summary = problem.curvature_summary().ok()?;
    let params = TheoryParams {
        memory: config.memory,
        b: config.b,
        b_h: config.b_h,
        m: config.m,
        eta: config.eta,
        beta: config.beta,
        epsilon: 1e-6,
    };
    TheoryReport::compute(&summary, problem.dim(), params).ok()
}

enum Curvature {
    Identity,
    Lbfgs(LbfgsMemory),
    Block(BlockPartition, BlockMemory),
}

struct Counters {
    accepted: usize,
    skipped: usize,
}

pub fn run_with_observer<F>(
    problem: &ErmProblem,
    config: &SolverConfig,
    f_star: Option<f64>,
    mut observer: F,
) -> Result<RunOutput>
where
    F: FnMut(SolverEvent<'_>),
{
    let n = problem.n();
    let d = problem.dim();
    config.validate(n)?;
    if config.curvature != CurvatureMode::Identity && !(problem.lambda() > 0.0) {
        return Err(Error::NotStronglyConvex(problem.lambda()));
    }
    let clock = Instant::now();
    let dist = sampling_distribution(problem, config.sampling)?;
    let schedule = match config.anchor {
        AnchorMode::Full => None,
        AnchorMode::Subsampled { zeta, growth } => Some(AnchorSchedule::new(zeta, growth, n)?),
    };
    let mut mb_rng = Rng::new(config.seed, streams::MINIBATCH);
    let mut hess_rng = Rng::new(config.seed, streams::HESSIAN);
    let mut outer_rng = Rng::new(config.seed, streams::OUTER);
    let mut anchor_rng = Rng::new(config.seed, streams::ANCHOR);

    let mut curvature = match config.curvature {
        CurvatureMode::Identity => Curvature::Identity,
        CurvatureMode::Lbfgs => Curvature::Lbfgs(LbfgsMemory::new(d, config.memory)),
        CurvatureMode::Block { blocks } => {
            let mut part_rng = Rng::new(config.seed, streams::PARTITION);
            let part = build_partition(problem.dataset(), blocks, &mut part_rng)?;
            let mem = BlockMemory::new(&part, problem, config.memory);
            Curvature::Block(part, mem)
        }
    };
    if let Curvature::Lbfgs(mem) = &curvature {
        observer(SolverEvent::LbfgsUpdated(mem));
    }

    let mut x = initial_point(d, config);
    let (mut f, mut g) = problem.full_value_grad(&x)?;
    let mut meter = DataPassMeter::default();
    let mut counters = Counters {
        accepted: 0,
        skipped: 0,
    };
    let record = |epoch: usize, f: f64, g: &[f64], meter: &DataPassMeter, anchor_size: usize, c: &Counters| {
        EpochRecord {
            epoch,
            data_passes: meter.passes(n),
            grad_passes: meter.grad_passes(n),
            hvp_passes: meter.hvp_passes(n),
            f,
            subopt: f_star.map(|fs| f - fs),
            grad_norm: norm(g),
            anchor_size,
            pairs_accepted: c.accepted,
            pairs_skipped: c.skipped,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        }
    };
    let mut records = vec![record(0, f, &g, &meter, 0, &counters)];
    observer(SolverEvent::Epoch(&records[0]));

    let mut averager = IterateAverager::new(config.upsilon);
    let mut xbar_prev = vec![0.0; d];
    let mut r = 0usize;
    let mut cg_unconverged = 0usize;
    let mut epoch = 0usize;
    let termination = loop {
        let anchor: Anchor = match &schedule {
            Some(sched) if sched.size(epoch) < n => {
                make_subsampled_anchor(problem, &x, epoch, sched, &mut anchor_rng, &mut meter)?
            }
            _ => exact_anchor_from(x.clone(), f, g.clone(), n, &mut meter),
        };
        let mut selector = OuterSelector::new(config.outer, config.m, config.beta, d, &mut outer_rng)?;
        let mut xt = x.clone();
        for t in 0..config.m {
            averager.record(&xt);
            let batch = sample_with_replacement(&dist, config.b, &mut mb_rng);
            let v = vr_gradient(problem, &xt, &anchor, &batch, &dist, &mut meter)?;
            match &curvature {
                Curvature::Identity => axpy(-config.eta, &v, &mut xt),
                Curvature::Lbfgs(mem) => axpy(-config.eta, &mem.two_loop(&v), &mut xt),
                Curvature::Block(part, mem) => {
                    let rhs: Vec<f64> = v.iter().map(|vi| -vi).collect();
                    let sol = cg_solve(mem, part, &rhs, config.cg_tol, config.cg_max_iter)?;
                    if !sol.converged {
                        cg_unconverged += 1;
                    }
                    axpy(config.eta, &sol.x, &mut xt);
                }
            }
            if !all_finite(&xt) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    value: f64::NAN,
                });
            }

            let k = epoch * config.m + t;
            if !matches!(curvature, Curvature::Identity) && k > 0 && k.is_multiple_of(config.upsilon) {
                let xbar = averager.window_mean().expect("window holds at least one iterate");
                r += 1;
                let keep = !(config.skip_first_pair && r == 1);
                match &mut curvature {
                    Curvature::Identity => unreachable!(),
                    Curvature::Lbfgs(mem) => {
                        let tset = sample_without_replacement(n, config.b_h, &mut hess_rng)?;
                        if keep {
                            match make_pair(problem, &xbar, &xbar_prev, &tset, &mut meter) {
                                PairOutcome::Accepted(pair) => {
                                    mem.push(pair);
                                    counters.accepted += 1;
                                    observer(SolverEvent::LbfgsUpdated(mem));
                                }
                                PairOutcome::Skip(_) => counters.skipped += 1,
                            }
                        }
                    }
                    Curvature::Block(part, mem) => {
                        let batches = sample_block_batches(part, config.b_h, &mut hess_rng)?;
                        if keep {
                            let outcomes = push_block_pairs(mem, part, problem, &xbar, &xbar_prev, &batches, &mut meter);
                            for o in outcomes {
                                match o {
                                    BlockPairOutcome::Accepted => counters.accepted += 1,
                                    BlockPairOutcome::Skip(_) => counters.skipped += 1,
                                }
                            }
                            observer(SolverEvent::BlockUpdated(mem, part));
                        }
                    }
                }
                xbar_prev = xbar;
            }
            selector.observe(t + 1, &xt);
        }
        averager.record(&xt);

        let x_next = selector.finish();
        let (f_next, g_next) = match problem.full_value_grad(&x_next) {
            Ok(fg) => fg,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    value: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        epoch += 1;
        if !f_next.is_finite() || f_next > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                epoch,
                value: f_next,
            });
        }
        let rec = record(epoch, f_next, &g_next, &meter, anchor.size, &counters);
        observer(SolverEvent::Epoch(&rec));
        records.push(rec);

        let f_prev = f;
        x = x_next;
        f = f_next;
        g = g_next;
        if should_terminate(f, f_prev, config.epsilon, epoch, config.max_epochs) {
            break if (f - f_prev).abs() < config.epsilon {
                Termination::Converged
            } else {
                Termination::MaxEpochs
            };
        }
        if config.max_data_passes.is_some_and(|p| meter.passes(n) >= p) {
            break Termination::DataPassBudget;
        }
    };

    Ok(RunOutput {
        x,
        trace: Trace {
            n,
            dim: d,
            config: config.clone(),
            theory: theory_report(problem, config),
            f_star,
            records,
            termination,
            cg_unconverged,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthesize, Conditioning, Dataset, SynthSpec, Task};
    use crate::linalg::SparseVec;
    use crate::problem::Loss;

    fn synth_problem(n: usize, d: usize, loss: Loss, seed: u64) -> ErmProblem {
        let task = match loss {
            Loss::Logistic => Task::Classification,
            Loss::Ridge => Task::Regression,
        };
        let ds = synthesize(&SynthSpec {
            n,
            d,
            density: 0.5,
            conditioning: Conditioning::Well,
            task,
            seed,
        })
        .unwrap();
        ErmProblem::with_default_lambda(ds, loss).unwrap()
    }

    #[test]
    fn zero_step_terminates_after_one_epoch() {
        let p = synth_problem(30, 5, Loss::Logistic, 1);
        let mut c = SolverConfig::defaults_for(30);
        c.eta = 0.0;
        c.init_scale = 0.5;
        let x0 = initial_point(5, &c);
        let out = run(&p, &c, None).unwrap();
        assert_eq!(out.x, x0);
        assert_eq!(out.trace.records.len(), 2);
        assert_eq!(out.trace.termination, Termination::Converged);
    }

    #[test]
    fn one_example_ridge_is_gradient_descent() {
        let ds = Dataset::new(1, vec![SparseVec::from_dense(&[1.0])], vec![1.0], Task::Regression).unwrap();
        let p = ErmProblem::new(ds, Loss::Ridge, 1.0).unwrap();
        let mut c = SolverConfig::defaults_for(1);
        c.curvature = CurvatureMode::Identity;
        c.outer = OuterOption::Last;
        c.eta = 0.1;
        c.m = 5;
        c.epsilon = 0.0;
        c.max_epochs = 40;
        let out = run(&p, &c, None).unwrap();
        let mut x = 0.0;
        for _ in 0..200 {
            x -= 0.1 * (2.0 * (x - 1.0) + x);
        }
        assert!((out.x[0] - x).abs() <= 1e-12);
        assert!((out.x[0] - 2.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn runs_are_deterministic() {
        let p = synth_problem(60, 8, Loss::Logistic, 2);
        for curvature in [CurvatureMode::Identity, CurvatureMode::Lbfgs, CurvatureMode::Block { blocks: 3 }] {
            let mut c = SolverConfig::defaults_for(60);
            c.curvature = curvature;
            c.max_epochs = 4;
            c.epsilon = 0.0;
            c.anchor = SolverConfig::standard_subsampled_anchor(60);
            let a = run(&p, &c, None).unwrap();
            let b = run(&p, &c, None).unwrap();
            assert_eq!(a.x, b.x);
            let strip = |t: &Trace| {
                t.records
                    .iter()
                    .map(|r| EpochRecord { wall_ms: 0.0, ..r.clone() })
                    .collect::<Vec<_>>()
            };
            assert_eq!(strip(&a.trace), strip(&b.trace));
            let passes: Vec<f64> = a.trace.records.iter().map(|r| r.data_passes).collect();
            assert!(passes.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn data_pass_accounting_matches_formula() {
        let p = synth_problem(100, 6, Loss::Ridge, 3);
        let mut c = SolverConfig::defaults_for(100);
        c.epsilon = 0.0;
        c.max_epochs = 3;
        let out = run(&p, &c, None).unwrap();
        // b = 10, m = 10, upsilon = 10, b_h = 100: per epoch n + 2mb gradient
        // accesses and one b_h-sized pair per upsilon inner steps, except
        // at global step 0.
        let recs = &out.trace.records;
        let grad_per_epoch = (100 + 2 * 10 * 10) as f64 / 100.0;
        for (s, r) in recs.iter().enumerate().skip(1) {
            assert!((r.grad_passes - grad_per_epoch * s as f64).abs() < 1e-12);
            let pairs_attempted = ((s * 10 - 1) / 10) as f64;
            assert!((r.hvp_passes - pairs_attempted).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn divergence_is_reported() {
        let p = synth_problem(40, 5, Loss::Ridge, 4);
        let mut c = SolverConfig::defaults_for(40);
        c.curvature = CurvatureMode::Identity;
        c.eta = 50.0;
        c.epsilon = 0.0;
        c.max_epochs = 50;
        assert!(matches!(run(&p, &c, None), Err(Error::Diverged { .. })));
    }
}
