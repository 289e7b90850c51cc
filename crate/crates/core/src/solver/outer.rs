use rand::Rng as _;

use super::config::OuterOption;
use crate::error::{invalid, Result};
use crate::sampling::{geometric_dist, geometric_weights, Rng};

/// Streaming version of the outer-iterate rules: inner iterates are fed
/// one at a time, so only `O(d)` state is kept.
#[derive(Debug, Clone)]
pub enum OuterSelector {
    /// Keeps the iterate whose 1-based index was drawn up front.
    Pick { target: usize, picked: Option<Vec<f64>> },
    /// Running weighted mean `mean += (w_t / W_t)(x_t - mean)` with
    /// `W_t = w_1 + ... + w_t`. Option II uses unit weights. Identical
    /// iterates leave the mean bitwise unchanged.
    Weighted {
        weights: Option<Vec<f64>>,
        mean: Vec<f64>,
        wsum: f64,
    },
    Last(Option<Vec<f64>>),
}

impl OuterSelector {
    /// Prepares the selector for an epoch of `m` inner iterates in
    /// dimension `dim`. Sampling rules draw their index from `rng` now.
    pub fn new(option: OuterOption, m: usize, beta: f64, dim: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 {
            return Err(invalid("m must be at least 1"));
        }
        Ok(match option {
            OuterOption::UniformSample => OuterSelector::Pick {
                target: rng.random_range(1..=m),
                picked: None,
            },
            OuterOption::GeometricSample => OuterSelector::Pick {
                target: geometric_dist(m, beta)?.sample(rng) + 1,
                picked: None,
            },
            OuterOption::UniformAverage => OuterSelector::Weighted {
                weights: None,
                mean: vec![0.0; dim],
                wsum: 0.0,
            },
            OuterOption::GeometricAverage => OuterSelector::Weighted {
                weights: Some(geometric_weights(m, beta)?),
                mean: vec![0.0; dim],
                wsum: 0.0,
            },
            OuterOption::Last => OuterSelector::Last(None),
        })
    }

    /// Feeds inner iterate `x_{s,t}` for `t = 1..=m` in order.
    pub fn observe(&mut self, t: usize, x: &[f64]) {
        match self {
            OuterSelector::Pick { target, picked } => {
                if t == *target {
                    *picked = Some(x.to_vec());
                }
            }
            OuterSelector::Weighted { weights, mean, wsum } => {
                let w = weights.as_ref().map_or(1.0, |w| w[t - 1]);
                *wsum += w;
                let r = w / *wsum;
                for (a, xi) in mean.iter_mut().zip(x) {
                    *a += r * (xi - *a);
                }
            }
            OuterSelector::Last(last) => *last = Some(x.to_vec()),
        }
    }

    pub fn finish(self) -> Vec<f64> {
        match self {
            OuterSelector::Pick { picked, .. } => picked.expect("every inner iterate observed"),
            OuterSelector::Weighted { mean, .. } => mean,
            OuterSelector::Last(last) => last.expect("every inner iterate observed"),
        }
    }
}

/// Chooses `x^{s+1}` from the inner iterates `x_{s,1..m}`.
pub fn select_next_outer(iterates: &[Vec<f64>], option: OuterOption, beta: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let dim = iterates.first().map_or(0, Vec::len);
    let mut sel = OuterSelector::new(option, iterates.len(), beta, dim, rng)?;
    for (k, x) in iterates.iter().enumerate() {
        sel.observe(k + 1, x);
    }
    Ok(sel.finish())
}

/// Stops when `|f_curr - f_prev| < epsilon` (strict) or `epoch >= max_epochs`.
pub fn should_terminate(f_curr: f64, f_prev: f64, epsilon: f64, epoch: usize, max_epochs: usize) -> bool {
    (f_curr - f_prev).abs() < epsilon || epoch >= max_epochs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iterates(m: usize) -> Vec<Vec<f64>> {
        (1..=m).map(|t| vec![t as f64, (t * t) as f64 * 0.1]).collect()
    }

    #[test]
    fn single_iterate() {
        let mut rng = Rng::new(1, "o");
        for o in OuterOption::ALL {
            assert_eq!(select_next_outer(&iterates(1), o, 0.5, &mut rng).unwrap(), vec![1.0, 0.1]);
        }
    }

    #[test]
    fn geometric_average_with_unit_beta_is_plain_mean() {
        let mut rng = Rng::new(2, "o");
        let xs: Vec<Vec<f64>> = (0..7).map(|t| vec![0.1 * t as f64, 1.0 / (1.0 + t as f64)]).collect();
        let a = select_next_outer(&xs, OuterOption::UniformAverage, 1.0, &mut rng).unwrap();
        let b = select_next_outer(&xs, OuterOption::GeometricAverage, 1.0, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn last_and_weighted_mean() {
        let mut rng = Rng::new(3, "o");
        let xs = iterates(3);
        assert_eq!(select_next_outer(&xs, OuterOption::Last, 0.5, &mut rng).unwrap(), xs[2]);
        let g = select_next_outer(&xs, OuterOption::GeometricAverage, 0.5, &mut rng).unwrap();
        let want = (1.0 * 0.25 + 2.0 * 0.5 + 3.0) / 1.75;
        assert!((g[0] - want).abs() < 1e-15);
        let same = vec![vec![0.1, -0.7]; 5];
        for o in [OuterOption::UniformAverage, OuterOption::GeometricAverage] {
            assert_eq!(select_next_outer(&same, o, 0.3, &mut rng).unwrap(), same[0]);
        }
    }

    #[test]
    fn geometric_sample_frequencies() {
        let mut rng = Rng::new(4, "o");
        let xs = iterates(3);
        let mut counts = [0usize; 3];
        let trials = 70_000;
        for _ in 0..trials {
            let x = select_next_outer(&xs, OuterOption::GeometricSample, 0.5, &mut rng).unwrap();
            counts[x[0] as usize - 1] += 1;
        }
        let want = [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0];
        for (c, w) in counts.iter().zip(want) {
            assert!((*c as f64 / trials as f64 - w).abs() <= 0.01, "{counts:?}");
        }
    }

    #[test]
    fn termination_rule() {
        assert!(should_terminate(1.0, 1.0, 1e-9, 1, 10));
        assert!(!should_terminate(1.0, 1.0, 0.0, 1, 10));
        assert!(should_terminate(1.0, 2.0, 0.0, 10, 10));
        assert!(!should_terminate(1.5, 1.0, 0.5, 1, 10));
    }
}
