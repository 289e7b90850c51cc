//! Closed-form diagnostics: spectral bounds of the metric matrices,
//! convergence rates for the outer-iterate rules and complexity estimates.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lbfgs::LbfgsMemory;
use crate::problem::CurvatureSummary;

/// Bounds `gamma I <= H_r <= Gamma I` for a memory of `memory` pairs built
/// from Hessian subsamples with mean constants `mu_bar <= l_bar`.
pub fn spectral_bounds(memory: usize, mu_bar: f64, l_bar: f64) -> Result<(f64, f64)> {
    if !(mu_bar > 0.0 && l_bar >= mu_bar && l_bar.is_finite()) {
        return Err(invalid(format!(
            "need 0 < mu_bar <= l_bar, got mu_bar = {mu_bar}, l_bar = {l_bar}"
        )));
    }
    let m = memory as f64;
    let kappa = l_bar / mu_bar;
    let gamma = 1.0 / ((m + 1.0) * l_bar);
    let big_gamma = if kappa == 1.0 {
        (1.0 + m) / mu_bar
    } else {
        kappa.powf(m + 1.0) / (mu_bar * (kappa - 1.0))
    };
    Ok((gamma, big_gamma))
}

/// `(M + 1) kappa^(M+2) / (kappa - 1)`, the ratio `Gamma / gamma`.
pub fn kappa_h(memory: usize, kappa: f64) -> Result<f64> {
    if !(kappa > 1.0) || !kappa.is_finite() {
        return Err(invalid(format!("kappa = {kappa} must exceed 1")));
    }
    let m = memory as f64;
    Ok((m + 1.0) * kappa.powf(m + 2.0) / (kappa - 1.0))
}

/// Large-`kappa` form `(M + 1) kappa^(M+1)`. Display only.
pub fn kappa_h_approx(memory: usize, kappa: f64) -> f64 {
    let m = memory as f64;
    (m + 1.0) * kappa.powf(m + 1.0)
}

/// A rate value or the reason it does not certify contraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Rate {
    Feasible { value: f64 },
    /// `eta` is not below `min(b/12, 1) / (Gamma L_bar)`.
    StepTooLarge { limit: f64 },
    /// The formula evaluates to a value `>= 1`.
    NotContractive { value: f64 },
    /// `beta` exceeds `1 - eta gamma mu_bar`.
    BetaOutOfRange { cap: f64 },
}

impl Rate {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Rate::Feasible { value } | Rate::NotContractive { value } => Some(value),
            _ => None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, Rate::Feasible { .. })
    }

    fn from_value(value: f64) -> Self {
        if value < 1.0 {
            Rate::Feasible { value }
        } else {
            Rate::NotContractive { value }
        }
    }
}

/// Inputs shared by the two rate formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateInputs {
    pub eta: f64,
    pub m: usize,
    pub b: usize,
    pub gamma: f64,
    pub big_gamma: f64,
    pub mu_bar: f64,
    pub l_bar: f64,
}

impl RateInputs {
    /// Largest admissible step `min(b/12, 1) / (Gamma L_bar)` (exclusive).
    pub fn step_limit(&self) -> f64 {
        (self.b as f64 / 12.0).min(1.0) / (self.big_gamma * self.l_bar)
    }

    fn admissible(&self) -> bool {
        self.eta > 0.0 && self.m > 0 && self.b > 0 && self.eta < self.step_limit()
    }
}

/// Contraction factor for uniform sampling or averaging of inner iterates:
/// `b / (gamma mu m eta (b - 4 eta Gamma L)) + 4 eta Gamma L (1 + 1/m) / (b - 4 eta Gamma L)`.
pub fn rate_rho(inp: &RateInputs) -> Rate {
    if !inp.admissible() {
        return Rate::StepTooLarge {
            limit: inp.step_limit(),
        };
    }
    let b = inp.b as f64;
    let m = inp.m as f64;
    let t = 4.0 * inp.eta * inp.big_gamma * inp.l_bar;
    let denom = b - t;
    let value = b / (inp.gamma * inp.mu_bar * m * inp.eta * denom) + t / denom * (1.0 + 1.0 / m);
    Rate::from_value(value)
}

/// `c = sum_{t=1}^m beta^(m-t)` and `c' = c / (1 - eta gamma mu)^m`, both
/// evaluated without cancellation for `beta` and `eta gamma mu` near 1 and 0.
pub fn geometric_constants(m: usize, beta: f64, eta: f64, gamma: f64, mu_bar: f64) -> (f64, f64) {
    let mf = m as f64;
    let c = if beta == 1.0 {
        mf
    } else {
        let ln_beta = if beta >= 0.5 { (beta - 1.0).ln_1p() } else { beta.ln() };
        -(mf * ln_beta).exp_m1() / (1.0 - beta)
    };
    let q_pow_m = (mf * (-eta * gamma * mu_bar).ln_1p()).exp();
    (c, c / q_pow_m)
}

/// Contraction factor for geometrically weighted sampling or averaging of
/// inner iterates, with `q = 1 - eta gamma mu`:
/// `b / (gamma mu c' eta (b - 4 eta Gamma L / q)) + 4 eta Gamma L (1 + 1/c') / (b - 4 eta Gamma L / q)`.
pub fn rate_rho_bar(inp: &RateInputs, beta: f64) -> Rate {
    if !inp.admissible() {
        return Rate::StepTooLarge {
            limit: inp.step_limit(),
        };
    }
    let x = inp.eta * inp.gamma * inp.mu_bar;
    let q = 1.0 - x;
    if !(beta > 0.0 && beta <= q) {
        return Rate::BetaOutOfRange { cap: q };
    }
    let (_, c_prime) = geometric_constants(inp.m, beta, inp.eta, inp.gamma, inp.mu_bar);
    let b = inp.b as f64;
    let t = 4.0 * inp.eta * inp.big_gamma * inp.l_bar;
    let denom = b - t / q;
    if !(denom > 0.0) {
        return Rate::StepTooLarge {
            limit: inp.step_limit(),
        };
    }
    let value = b / (inp.gamma * inp.mu_bar * c_prime * inp.eta * denom) + t / denom * (1.0 + 1.0 / c_prime);
    Rate::from_value(value)
}

/// Order estimate `(n + kappa kappa_H) d ln(1/eps)` with unit constant.
pub fn complexity_estimate(n: usize, d: usize, kappa: f64, kappa_h: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(format!("epsilon = {epsilon} is outside (0, 1)")));
    }
    Ok((n as f64 + kappa * kappa_h) * d as f64 * (1.0 / epsilon).ln())
}

/// Earlier dimension-dependent bounds, kept for comparison tables only.
/// Values overflow quickly, so base-10 logarithms are reported alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorWorkBounds {
    pub gamma: f64,
    pub log10_big_gamma: f64,
    pub log10_kappa_h: f64,
    pub log10_complexity: f64,
}

pub fn prior_work_bounds(
    memory: usize,
    d: usize,
    n: usize,
    b: usize,
    summary: &CurvatureSummary,
    epsilon: f64,
) -> PriorWorkBounds {
    let k = (d + memory) as f64;
    let kmax = summary.kappa_max();
    let gamma = 1.0 / (k * summary.l_max());
    let log10_big_gamma = (k - 1.0) * (k.log10() + kmax.log10()) - summary.mu_min().log10();
    let log10_kappa_h = k * (k.log10() + kmax.log10());
    // (n + b (kappa_max kappa_H)^2) d ln(1/eps), summed in log space.
    let log_quad = (b as f64).log10() + 2.0 * (kmax.log10() + log10_kappa_h);
    let log_n = (n as f64).log10();
    let (hi, lo) = if log_quad > log_n { (log_quad, log_n) } else { (log_n, log_quad) };
    let log_sum = hi + (10f64.powf(lo - hi)).ln_1p() / std::f64::consts::LN_10;
    let log10_complexity = log_sum + (d as f64).log10() + (1.0 / epsilon).ln().log10();
    PriorWorkBounds {
        gamma,
        log10_big_gamma,
        log10_kappa_h,
        log10_complexity,
    }
}

/// Parameters that determine the diagnostics of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub memory: usize,
    pub b: usize,
    pub b_h: usize,
    pub m: usize,
    pub eta: f64,
    pub beta: f64,
    /// Target accuracy used by the complexity estimate.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub params: TheoryParams,
    pub mu_bar: f64,
    pub l_bar: f64,
    pub kappa: f64,
    pub kappa_max: f64,
    pub mu_bar_bh: f64,
    pub l_bar_bh: f64,
    pub kappa_bh: f64,
    pub gamma: f64,
    pub big_gamma: f64,
    pub kappa_h: f64,
    pub kappa_h_approx: f64,
    pub step_limit: f64,
    pub rho: Rate,
    pub rho_bar: Rate,
    pub c: f64,
    pub c_prime: f64,
    pub complexity: f64,
    pub prior_work: PriorWorkBounds,
    /// True when the step is admissible and the rate for the selected
    /// outer rule is below 1.
    pub feasible: bool,
}

impl TheoryReport {
    pub fn compute(summary: &CurvatureSummary, d: usize, params: TheoryParams) -> Result<Self> {
        let n = summary.n();
        let b_h = params.b_h.clamp(1, n);
        let mu_bar = summary.mu_bar(n)?;
        let l_bar = summary.l_bar(n)?;
        let mu_bar_bh = summary.mu_bar(b_h)?;
        let l_bar_bh = summary.l_bar(b_h)?;
        let kappa_bh = l_bar_bh / mu_bar_bh;
        let (gamma, big_gamma) = spectral_bounds(params.memory, mu_bar_bh, l_bar_bh)?;
        let kh = if kappa_bh > 1.0 {
            kappa_h(params.memory, kappa_bh)?
        } else {
            big_gamma / gamma
        };
        let inputs = RateInputs {
            eta: params.eta,
            m: params.m,
            b: params.b,
            gamma,
            big_gamma,
            mu_bar,
            l_bar,
        };
        let rho = rate_rho(&inputs);
        let rho_bar = rate_rho_bar(&inputs, params.beta);
        let (c, c_prime) = geometric_constants(params.m, params.beta, params.eta, gamma, mu_bar);
        let kappa = l_bar / mu_bar;
        let eps = if params.epsilon > 0.0 && params.epsilon < 1.0 {
            params.epsilon
        } else {
            1e-6
        };
        let complexity = complexity_estimate(n, d, kappa, kh, eps)?;
        let prior_work = prior_work_bounds(params.memory, d, n, params.b, summary, eps);
        Ok(Self {
            params,
            mu_bar,
            l_bar,
            kappa,
            kappa_max: summary.kappa_max(),
            mu_bar_bh,
            l_bar_bh,
            kappa_bh,
            gamma,
            big_gamma,
            kappa_h: kh,
            kappa_h_approx: kappa_h_approx(params.memory, kappa_bh),
            step_limit: inputs.step_limit(),
            rho,
            rho_bar,
            c,
            c_prime,
            complexity,
            prior_work,
            feasible: rho.is_feasible(),
        })
    }
}

/// Result of checking metric-matrix spectra against `[gamma, Gamma]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectraReport {
    pub checked: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub tolerance: f64,
    /// Indices of snapshots with an eigenvalue outside the band.
    pub failures: Vec<usize>,
    pub pass: bool,
}

/// Eigendecomposes each dense `H_r` and checks it lies in
/// `[gamma - tol, Gamma + tol]` with `tol = 1e-9 Gamma`.
pub fn certify_spectra(snapshots: &[LbfgsMemory], gamma: f64, big_gamma: f64) -> Result<SpectraReport> {
    let tolerance = 1e-9 * big_gamma;
    let mut min_eigenvalue = f64::INFINITY;
    let mut max_eigenvalue = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for (k, mem) in snapshots.iter().enumerate() {
        let h = mem.dense_reconstruct()?;
        let eig = SymmetricEigen::new(h).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        min_eigenvalue = min_eigenvalue.min(lo);
        max_eigenvalue = max_eigenvalue.max(hi);
        if !(lo >= gamma - tolerance && hi <= big_gamma + tolerance) {
            failures.push(k);
        }
    }
    Ok(SpectraReport {
        checked: snapshots.len(),
        min_eigenvalue,
        max_eigenvalue,
        tolerance,
        pass: failures.is_empty(),
        failures,
    })
}
