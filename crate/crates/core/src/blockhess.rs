//! Low-dimensional block curvature: the examples are split into groups, each
//! group keeps a compact limited-memory BFGS Hessian on the coordinates its
//! rows touch, and the blocks are averaged into an operator that is inverted
//! by conjugate gradients.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, LU};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{invalid, Error, Result};
use crate::lbfgs::{SkipReason, CURVATURE_FLOOR};
use crate::linalg::{all_finite, dot, norm, norm_sq};
use crate::problem::ErmProblem;
use crate::sampling::{sample_without_replacement, Rng};
use crate::svrg::DataPassMeter;

/// Random even split of the examples with each group's coordinate support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    dim: usize,
    groups: Vec<Vec<usize>>,
    supports: Vec<Vec<usize>>,
}

impl BlockPartition {
    /// Builds a partition from explicit groups, computing supports.
    pub fn from_groups(data: &Dataset, groups: Vec<Vec<usize>>) -> Result<Self> {
        let n = data.n();
        let mut seen = vec![false; n];
        for g in &groups {
            for &i in g {
                if i >= n || seen[i] {
                    return Err(invalid(format!("example {i} is out of range or repeated")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid("groups do not cover every example"));
        }
        let supports = groups
            .iter()
            .map(|g| {
                let mut mark = vec![false; data.dim()];
                for &i in g {
                    for &j in data.row(i).indices() {
                        mark[j] = true;
                    }
                }
                (0..data.dim()).filter(|&j| mark[j]).collect()
            })
            .collect();
        Ok(Self {
            dim: data.dim(),
            groups,
            supports,
        })
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Sorted coordinates touched by group `i`.
    pub fn support(&self, i: usize) -> &[usize] {
        &self.supports[i]
    }

    /// `sum_i |S_i|`.
    pub fn total_support(&self) -> usize {
        self.supports.iter().map(Vec::len).sum()
    }

    /// Coordinates that belong to no support.
    pub fn uncovered(&self) -> Vec<usize> {
        let mut mark = vec![false; self.dim];
        for s in &self.supports {
            for &j in s {
                mark[j] = true;
            }
        }
        (0..self.dim).filter(|&j| !mark[j]).collect()
    }

    fn project(&self, i: usize, z: &[f64]) -> Vec<f64> {
        self.supports[i].iter().map(|&j| z[j]).collect()
    }
}

/// Shuffles the examples and deals them into `k` groups whose sizes differ
/// by at most one.
pub fn build_partition(data: &Dataset, k: usize, rng: &mut Rng) -> Result<BlockPartition> {
    let n = data.n();
    if k == 0 || k > n {
        return Err(invalid(format!("block count {k} must be in 1..={n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let base = n / k;
    let extra = n % k;
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for g in 0..k {
        let len = base + usize::from(g < extra);
        let mut grp = perm[start..start + len].to_vec();
        grp.sort_unstable();
        groups.push(grp);
        start += len;
    }
    BlockPartition::from_groups(data, groups)
}

/// Compact form `B = delta I - W M^{-1} W^T` of limited-memory BFGS with
/// `W = [delta S, Y]`, `M = [[delta S^T S, L], [L^T, -D]]`, `L` the strictly
/// lower part of `S^T Y`, `D` its diagonal and `delta = y^T y / s^T y` of the
/// newest pair.
#[derive(Debug, Clone)]
pub struct CompactBfgs {
    dim: usize,
    delta: f64,
    w: DMatrix<f64>,
    middle: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl CompactBfgs {
    /// `pairs` are ordered oldest to newest and must have positive curvature.
    pub fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let Some((s_new, y_new)) = pairs.last() else {
            return Err(invalid("compact form needs at least one pair"));
        };
        let dim = s_new.len();
        let k = pairs.len();
        let sy_new = dot(s_new, y_new);
        if !(sy_new > 0.0) {
            return Err(invalid("newest pair has nonpositive curvature"));
        }
        let delta = norm_sq(y_new) / sy_new;
        let s = DMatrix::from_fn(dim, k, |r, c| pairs[c].0[r]);
        let y = DMatrix::from_fn(dim, k, |r, c| pairs[c].1[r]);
        let sts = s.transpose() * &s;
        let sty = s.transpose() * &y;
        let mut m = DMatrix::<f64>::zeros(2 * k, 2 * k);
        for r in 0..k {
            for c in 0..k {
                m[(r, c)] = delta * sts[(r, c)];
                if r > c {
                    m[(r, k + c)] = sty[(r, c)];
                    m[(k + c, r)] = sty[(r, c)];
                }
            }
            m[(k + r, k + r)] = -sty[(r, r)];
        }
        let mut w = DMatrix::<f64>::zeros(dim, 2 * k);
        w.view_mut((0, 0), (dim, k)).copy_from(&(s * delta));
        w.view_mut((0, k), (dim, k)).copy_from(&y);
        let lu = m.lu();
        let middle = lu.is_invertible().then_some(lu);
        Ok(Self {
            dim,
            delta,
            w,
            middle,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// False when the middle matrix was singular and `B` falls back to `delta I`.
    pub fn is_factorized(&self) -> bool {
        self.middle.is_some()
    }

    fn correction(&self, wz: &DVector<f64>) -> Option<DVector<f64>> {
        self.middle.as_ref().and_then(|lu| lu.solve(wz))
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let zv = DVector::from_column_slice(z);
        let mut out = &zv * self.delta;
        let wz = self.w.transpose() * &zv;
        if let Some(c) = self.correction(&wz) {
            out -= &self.w * c;
        }
        out.as_slice().to_vec()
    }

    /// `z^T B z = delta ||z||^2 - (W^T z)^T M^{-1} (W^T z)` and an operation
    /// count (multiply-adds) for the evaluation.
    pub fn quad_form_counted(&self, z: &[f64]) -> (f64, u64) {
        let dim = self.dim as u64;
        let two_k = self.w.ncols() as u64;
        let zv = DVector::from_column_slice(z);
        let mut value = self.delta * norm_sq(z);
        let wz = self.w.transpose() * &zv;
        let mut flops = dim + two_k * dim;
        if let Some(c) = self.correction(&wz) {
            value -= wz.dot(&c);
            flops += two_k * two_k + two_k;
        }
        (value, flops)
    }

    pub fn quad_form(&self, z: &[f64]) -> f64 {
        self.quad_form_counted(z).0
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut b = DMatrix::<f64>::identity(self.dim, self.dim) * self.delta;
        if let Some(lu) = &self.middle {
            if let Some(minv_wt) = lu.solve(&self.w.transpose()) {
                b -= &self.w * minv_wt;
            }
        }
        b
    }
}

/// Dense direct BFGS recursion
/// `B <- B - B s s^T B / (s^T B s) + y y^T / (y^T s)` from `delta I`, with
/// `delta` taken from the newest pair. Reference for [`CompactBfgs`].
pub fn bfgs_recursion_dense(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<DMatrix<f64>> {
    let Some((s_new, y_new)) = pairs.last() else {
        return Err(invalid("recursion needs at least one pair"));
    };
    let dim = s_new.len();
    let delta = norm_sq(y_new) / dot(s_new, y_new);
    let mut b = DMatrix::<f64>::identity(dim, dim) * delta;
    for (s, y) in pairs {
        let s = DVector::from_column_slice(s);
        let y = DVector::from_column_slice(y);
        let bs = &b * &s;
        let sbs = s.dot(&bs);
        b = b - (&bs * bs.transpose()) / sbs + (&y * y.transpose()) / y.dot(&s);
    }
    Ok(b)
}

#[derive(Debug, Clone, Default)]
struct Block {
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
    compact: Option<CompactBfgs>,
}

/// Outcome of one block's pair update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockPairOutcome {
    Accepted,
    Skip(SkipReason),
}

/// Per-block pair rings and their compact Hessians.
#[derive(Debug, Clone)]
pub struct BlockMemory {
    n: usize,
    lambda: f64,
    capacity: usize,
    blocks: Vec<Block>,
    active: Vec<bool>,
    uncovered: Vec<usize>,
}

impl BlockMemory {
    pub fn new(partition: &BlockPartition, problem: &ErmProblem, capacity: usize) -> Self {
        Self {
            n: problem.n(),
            lambda: problem.lambda(),
            capacity: capacity.max(1),
            blocks: vec![Block::default(); partition.k()],
            active: (0..partition.k()).map(|i| !partition.support(i).is_empty()).collect(),
            uncovered: partition.uncovered(),
        }
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn pair_count(&self, i: usize) -> usize {
        self.blocks[i].pairs.len()
    }

    /// Projected pairs of block `i`, oldest first.
    pub fn block_pairs(&self, i: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.blocks[i].pairs.iter().cloned().collect()
    }

    pub fn block_compact(&self, i: usize) -> Option<&CompactBfgs> {
        self.blocks[i].compact.as_ref()
    }

    /// True until every block with a nonempty support holds a pair. In
    /// that state the operator is the identity.
    pub fn identity_fallback(&self) -> bool {
        self.blocks
            .iter()
            .zip(&self.active)
            .any(|(b, &active)| active && b.compact.is_none())
    }

    fn insert(&mut self, i: usize, s: Vec<f64>, y: Vec<f64>) {
        let block = &mut self.blocks[i];
        if block.pairs.len() == self.capacity {
            block.pairs.pop_front();
        }
        block.pairs.push_back((s, y));
        let pairs: Vec<_> = block.pairs.iter().cloned().collect();
        block.compact = CompactBfgs::from_pairs(&pairs).ok();
    }

    /// `B z = (1/n) sum_i U_i^T B_i U_i z`, with `lambda z_j` on coordinates
    /// outside every support. Blocks are reduced in index order.
    pub fn apply_b(&self, partition: &BlockPartition, z: &[f64]) -> Vec<f64> {
        if self.identity_fallback() {
            return z.to_vec();
        }
        let mut out = vec![0.0; z.len()];
        let inv_n = 1.0 / self.n as f64;
        for (i, block) in self.blocks.iter().enumerate() {
            let Some(compact) = &block.compact else { continue };
            let bz = compact.apply(&partition.project(i, z));
            for (&j, v) in partition.support(i).iter().zip(bz) {
                out[j] += inv_n * v;
            }
        }
        for &j in &self.uncovered {
            out[j] += self.lambda * z[j];
        }
        out
    }

    /// `z^T B z` evaluated block by block, with its operation count.
    pub fn quad_form_counted(&self, partition: &BlockPartition, z: &[f64]) -> (f64, u64) {
        if self.identity_fallback() {
            return (norm_sq(z), z.len() as u64);
        }
        let mut total = 0.0;
        let mut flops = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            let Some(compact) = &block.compact else { continue };
            let (q, f) = compact.quad_form_counted(&partition.project(i, z));
            total += q;
            flops += f;
        }
        total /= self.n as f64;
        for &j in &self.uncovered {
            total += self.lambda * z[j] * z[j];
            flops += 1;
        }
        (total, flops)
    }

    pub fn quad_form(&self, partition: &BlockPartition, z: &[f64]) -> f64 {
        self.quad_form_counted(partition, z).0
    }

    /// Dense `B` assembled from dense block matrices. Small instances only.
    pub fn dense_assembly(&self, partition: &BlockPartition) -> DMatrix<f64> {
        let d = partition.dim();
        if self.identity_fallback() {
            return DMatrix::identity(d, d);
        }
        let mut b = DMatrix::<f64>::zeros(d, d);
        for (i, block) in self.blocks.iter().enumerate() {
            let Some(compact) = &block.compact else { continue };
            let bi = compact.to_dense();
            let sup = partition.support(i);
            for (r, &jr) in sup.iter().enumerate() {
                for (c, &jc) in sup.iter().enumerate() {
                    b[(jr, jc)] += bi[(r, c)] / self.n as f64;
                }
            }
        }
        for &j in &self.uncovered {
            b[(j, j)] += self.lambda;
        }
        b
    }
}

/// Per-block Hessian sample size `ceil(b_h / K)` clamped to the group size.
pub fn block_batch_size(b_h: usize, k: usize, group_len: usize) -> usize {
    b_h.div_ceil(k).clamp(1, group_len.max(1)).min(group_len)
}

/// Draws each block's Hessian sample uniformly without replacement from its
/// group.
pub fn sample_block_batches(partition: &BlockPartition, b_h: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    partition
        .groups()
        .iter()
        .map(|g| {
            let size = block_batch_size(b_h, partition.k(), g.len());
            let local = sample_without_replacement(g.len(), size, rng)?;
            Ok(local.into_iter().map(|l| g[l]).collect())
        })
        .collect()
}

/// Appends one projected pair per block. For block `i`,
/// `s_i = U_i (xbar_new - xbar_old)` and
/// `y_i = (|P_i| / |T_i|) sum_{l in T_i} U_i grad^2 f_l(xbar_new) U_i^T s_i`,
/// an unbiased estimate of the group-sum Hessian applied to `s_i`.
pub fn push_block_pairs(
    mem: &mut BlockMemory,
    partition: &BlockPartition,
    problem: &ErmProblem,
    xbar_new: &[f64],
    xbar_old: &[f64],
    hess_batches: &[Vec<usize>],
    meter: &mut DataPassMeter,
) -> Vec<BlockPairOutcome> {
    let data = problem.dataset();
    let lambda = problem.lambda();
    let mut outcomes = Vec::with_capacity(partition.k());
    for i in 0..partition.k() {
        let sup = partition.support(i);
        let s_i: Vec<f64> = sup.iter().map(|&j| xbar_new[j] - xbar_old[j]).collect();
        let batch = &hess_batches[i];
        if norm_sq(&s_i) == 0.0 || batch.is_empty() {
            outcomes.push(BlockPairOutcome::Skip(SkipReason::ZeroStep));
            continue;
        }
        let mut y_i = vec![0.0; sup.len()];
        for &l in batch {
            let a = data.row(l);
            let mut a_dot_s = 0.0;
            for (j, v) in a.iter() {
                a_dot_s += v * (xbar_new[j] - xbar_old[j]);
            }
            let c = problem.loss_curvature(l, xbar_new) * a_dot_s;
            for (j, v) in a.iter() {
                let pos = sup.binary_search(&j).expect("row support inside group support");
                y_i[pos] += c * v;
            }
            for (y, s) in y_i.iter_mut().zip(&s_i) {
                *y += lambda * s;
            }
        }
        meter.hvp_evals += batch.len() as u64;
        let scale = partition.group(i).len() as f64 / batch.len() as f64;
        for y in &mut y_i {
            *y *= scale;
        }
        if !all_finite(&y_i) {
            outcomes.push(BlockPairOutcome::Skip(SkipReason::NonFinite));
            continue;
        }
        let sy = dot(&s_i, &y_i);
        if !(sy > CURVATURE_FLOOR * norm(&s_i) * norm(&y_i)) {
            outcomes.push(BlockPairOutcome::Skip(SkipReason::NonPositiveCurvature));
            continue;
        }
        mem.insert(i, s_i, y_i);
        outcomes.push(BlockPairOutcome::Accepted);
    }
    outcomes
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Residual norms, starting with `||rhs||`.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// Conjugate gradients for an SPD operator, from `x = 0`, stopping when
/// `||r|| <= tol ||rhs||` or after `max_iter` iterations.
pub fn conjugate_gradient<F>(apply: F, rhs: &[f64], tol: f64, max_iter: usize) -> Result<CgOutcome>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let d = rhs.len();
    let mut x = vec![0.0; d];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = norm_sq(&r);
    let target = tol * rr.sqrt();
    let mut history = vec![rr.sqrt()];
    let mut iterations = 0;
    if !rr.is_finite() {
        return Err(Error::NonFinite("CG right-hand side".into()));
    }
    while rr.sqrt() > target && iterations < max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || !all_finite(&ap) {
            return Err(Error::NonFinite("CG operator product".into()));
        }
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        for j in 0..d {
            x[j] += alpha * p[j];
            r[j] -= alpha * ap[j];
        }
        let rr_new = norm_sq(&r);
        let beta = rr_new / rr;
        for j in 0..d {
            p[j] = r[j] + beta * p[j];
        }
        rr = rr_new;
        iterations += 1;
        history.push(rr.sqrt());
    }
    if !all_finite(&x) {
        return Err(Error::NonFinite("CG iterate".into()));
    }
    Ok(CgOutcome {
        x,
        iterations,
        converged: rr.sqrt() <= target,
        residual_history: history,
    })
}

/// Solves `B p = rhs` with the assembled block operator.
pub fn cg_solve(
    mem: &BlockMemory,
    partition: &BlockPartition,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    conjugate_gradient(|z| mem.apply_b(partition, z), rhs, tol, max_iter)
}
