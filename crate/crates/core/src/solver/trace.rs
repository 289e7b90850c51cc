use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::SolverConfig;
use crate::error::Result;
use crate::theory::TheoryReport;

/// Column order of the per-epoch CSV.
pub const CSV_COLUMNS: [&str; 9] = [
    "epoch",
    "data_passes",
    "f",
    "subopt",
    "grad_norm",
    "anchor_size",
    "pairs_accepted",
    "pairs_skipped",
    "wall_ms",
];

/// State after epoch `epoch` (epoch 0 is the starting point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Gradient plus Hessian-vector accesses so far, over `n`.
    pub data_passes: f64,
    pub grad_passes: f64,
    pub hvp_passes: f64,
    pub f: f64,
    pub subopt: Option<f64>,
    pub grad_norm: f64,
    /// Components in the anchor gradient used during this epoch.
    pub anchor_size: usize,
    /// Cumulative correction pairs accepted and skipped.
    pub pairs_accepted: usize,
    pub pairs_skipped: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Consecutive outer objectives differ by less than epsilon.
    Converged,
    MaxEpochs,
    DataPassBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub n: usize,
    pub dim: usize,
    pub config: SolverConfig,
    pub theory: Option<TheoryReport>,
    pub f_star: Option<f64>,
    pub records: Vec<EpochRecord>,
    pub termination: Termination,
    /// Number of CG solves that hit the iteration cap (block mode).
    pub cg_unconverged: usize,
}

impl Trace {
    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("trace holds the starting point")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.data_passes.to_string(),
                r.f.to_string(),
                r.subopt.map(|s| s.to_string()).unwrap_or_default(),
                r.grad_norm.to_string(),
                r.anchor_size.to_string(),
                r.pairs_accepted.to_string(),
                r.pairs_skipped.to_string(),
                format!("{:.3}", r.wall_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Suboptimality at `passes` data passes, interpolated linearly in
    /// `log10(subopt)` between the neighboring epochs. `None` without a
    /// reference or when the trace ends before `passes`.
    pub fn subopt_at_passes(&self, passes: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .records
            .iter()
            .map(|r| r.subopt.map(|s| (r.data_passes, s.max(f64::MIN_POSITIVE).log10())))
            .collect::<Option<_>>()?;
        let k = pts.iter().position(|&(p, _)| p >= passes)?;
        if k == 0 {
            return Some(10f64.powf(pts[0].1));
        }
        let (p0, l0) = pts[k - 1];
        let (p1, l1) = pts[k];
        let w = if p1 > p0 { (passes - p0) / (p1 - p0) } else { 1.0 };
        Some(10f64.powf(l0 + w * (l1 - l0)))
    }
}
