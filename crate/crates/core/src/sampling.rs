//! Seeded random streams, weighted minibatch sampling, uniform subset
//! sampling and the geometric outer-iterate distribution.

use rand::distr::Distribution;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;

use crate::error::{invalid, Result};
use crate::problem::ErmProblem;

/// Stream names used by the solver. Each role draws from its own stream so
/// toggling one feature never shifts another feature's random sequence.
pub mod streams {
    pub const MINIBATCH: &str = "minibatch";
    pub const HESSIAN: &str = "hessian";
    pub const OUTER: &str = "outer";
    pub const ANCHOR: &str = "anchor";
    pub const PARTITION: &str = "partition";
    pub const SYNTH: &str = "synth";
    pub const LABELS: &str = "labels";
    pub const INIT: &str = "init";
}

/// 64-bit FNV-1a, used to turn a stream name into a ChaCha stream id.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// ChaCha8 generator keyed by a seed and a named stream.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64, stream: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id(stream));
        Self(inner)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Discrete distribution over `0..n` with an alias table for O(1) draws.
#[derive(Debug, Clone)]
pub struct WeightedDist {
    probs: Vec<f64>,
    alias: WeightedAliasIndex<f64>,
}

impl WeightedDist {
    /// Normalizes nonnegative weights. Zero weights are allowed as long as
    /// at least one weight is positive.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("empty weight vector"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("weights sum to zero"));
        }
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let alias = WeightedAliasIndex::new(probs.clone())
            .map_err(|e| invalid(format!("cannot build alias table: {e}")))?;
        Ok(Self { probs, alias })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        self.alias.sample(rng)
    }
}

/// `p_i = L_i / sum_j L_j`.
pub fn build_lipschitz_dist(problem: &ErmProblem) -> Result<WeightedDist> {
    let l = problem.lipschitz();
    if let Some(i) = l.iter().position(|&li| !(li > 0.0)) {
        return Err(invalid(format!(
            "smoothness constant L_{i} = {} is not positive",
            l[i]
        )));
    }
    WeightedDist::from_weights(l)
}

/// `b` i.i.d. draws in the order drawn.
pub fn sample_with_replacement(dist: &WeightedDist, b: usize, rng: &mut Rng) -> Vec<usize> {
    (0..b).map(|_| dist.sample(rng)).collect()
}

/// A uniformly random `b`-subset of `0..n`, returned sorted.
pub fn sample_without_replacement(n: usize, b: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if b > n {
        return Err(invalid(format!("cannot draw {b} distinct indices from {n}")));
    }
    let mut idx = rand::seq::index::sample(rng, n, b).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Unnormalized weights `beta^(m-t)` for `t = 1..=m`, stored at `t - 1`.
pub fn geometric_weights(m: usize, beta: f64) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(invalid("m must be at least 1"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(invalid(format!("beta = {beta} is outside (0, 1]")));
    }
    Ok((1..=m).map(|t| beta.powi((m - t) as i32)).collect())
}

/// Distribution over inner iterates `1..=m` (stored 0-based) with weight
/// `beta^(m-t) / c`, favoring the most recent iterates.
pub fn geometric_dist(m: usize, beta: f64) -> Result<WeightedDist> {
    WeightedDist::from_weights(&geometric_weights(m, beta)?)
}
