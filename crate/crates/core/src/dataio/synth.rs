use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Task};
use crate::error::{invalid, Result};
use crate::linalg::SparseVec;
use crate::sampling::{streams, Rng};

/// Feature scaling before row normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// All coordinates share unit variance.
    Well,
    /// Coordinate variances decay geometrically over three decades.
    Ill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub density: f64,
    pub conditioning: Conditioning,
    pub task: Task,
    pub seed: u64,
}

const FLIP_RATE: f64 = 0.1;
const NOISE_STD: f64 = 0.1;

/// Generates unit-norm sparse Gaussian rows with labels from a planted
/// linear model: sign with 10% flips for classification, value plus
/// Gaussian noise for regression.
pub fn synthesize(spec: &SynthSpec) -> Result<Dataset> {
    let SynthSpec {
        n,
        d,
        density,
        conditioning,
        task,
        seed,
    } = *spec;
    if n == 0 || d == 0 {
        return Err(invalid("n and d must be at least 1"));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(invalid(format!("density = {density} is outside (0, 1]")));
    }
    let nnz = ((density * d as f64).round() as usize).clamp(1, d);
    let scale: Vec<f64> = (0..d)
        .map(|j| match conditioning {
            Conditioning::Well => 1.0,
            Conditioning::Ill if d == 1 => 1.0,
            Conditioning::Ill => 10f64.powf(-1.5 * j as f64 / (d - 1) as f64),
        })
        .collect();

    let mut rng = Rng::new(seed, streams::SYNTH);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut idx = rand::seq::index::sample(&mut rng, d, nnz).into_vec();
        idx.sort_unstable();
        let vals = idx
            .iter()
            .map(|&j| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale[j]
            })
            .collect();
        rows.push(SparseVec::new(idx, vals).expect("sorted distinct indices"));
    }

    let mut label_rng = Rng::new(seed, streams::LABELS);
    let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut label_rng)).collect();
    let unlabeled = Dataset::new(d, rows, vec![0.0; n], Task::Regression)?.normalize_rows();
    let labels = unlabeled
        .rows()
        .iter()
        .map(|a| {
            let t = a.dot_dense(&w);
            match task {
                Task::Classification => {
                    let y = if t >= 0.0 { 1.0 } else { -1.0 };
                    if label_rng.random::<f64>() < FLIP_RATE {
                        -y
                    } else {
                        y
                    }
                }
                Task::Regression => {
                    let e: f64 = StandardNormal.sample(&mut label_rng);
                    t + NOISE_STD * e
                }
            }
        })
        .collect();
    Dataset::new(d, unlabeled.rows().to_vec(), labels, task)
}
