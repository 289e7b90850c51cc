use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Rule for choosing the next outer iterate from `x_{s,1..m}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OuterOption {
    /// Option I: a uniformly sampled inner iterate.
    #[serde(rename = "1")]
    UniformSample,
    /// Option II: the mean of the inner iterates.
    #[serde(rename = "2")]
    UniformAverage,
    /// Option III: an inner iterate sampled with weight `beta^(m-t)`.
    #[serde(rename = "3")]
    GeometricSample,
    /// Option IV: the `beta^(m-t)`-weighted mean.
    #[serde(rename = "4")]
    GeometricAverage,
    /// The final inner iterate.
    #[serde(rename = "last")]
    Last,
}

impl OuterOption {
    pub const ALL: [OuterOption; 5] = [
        OuterOption::UniformSample,
        OuterOption::UniformAverage,
        OuterOption::GeometricSample,
        OuterOption::GeometricAverage,
        OuterOption::Last,
    ];

    /// True for the geometrically weighted rules.
    pub fn is_geometric(self) -> bool {
        matches!(self, OuterOption::GeometricSample | OuterOption::GeometricAverage)
    }
}

impl fmt::Display for OuterOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OuterOption::UniformSample => "1",
            OuterOption::UniformAverage => "2",
            OuterOption::GeometricSample => "3",
            OuterOption::GeometricAverage => "4",
            OuterOption::Last => "last",
        })
    }
}

impl FromStr for OuterOption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "i" => Ok(OuterOption::UniformSample),
            "2" | "ii" => Ok(OuterOption::UniformAverage),
            "3" | "iii" => Ok(OuterOption::GeometricSample),
            "4" | "iv" => Ok(OuterOption::GeometricAverage),
            "last" => Ok(OuterOption::Last),
            other => Err(invalid(format!("unknown outer option '{other}'"))),
        }
    }
}

/// How the search direction is preconditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CurvatureMode {
    /// Plain variance-reduced gradient steps.
    Identity,
    /// Two-loop limited-memory BFGS.
    Lbfgs,
    /// Block compact Hessians over `blocks` example groups, inverted by CG.
    Block { blocks: usize },
}

impl fmt::Display for CurvatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurvatureMode::Identity => f.write_str("identity"),
            CurvatureMode::Lbfgs => f.write_str("lbfgs"),
            CurvatureMode::Block { blocks } => write!(f, "block{blocks}"),
        }
    }
}

/// How the anchor gradient of each epoch is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AnchorMode {
    Full,
    /// Subsets of size `min(round(zeta * growth^s), n)`.
    Subsampled { zeta: f64, growth: f64 },
}

/// Minibatch sampling distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Uniform,
    /// `p_i` proportional to the component smoothness constant.
    Lipschitz,
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplingMode::Uniform),
            "lipschitz" => Ok(SamplingMode::Lipschitz),
            other => Err(invalid(format!("unknown sampling mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Minibatch size.
    pub b: usize,
    /// Hessian subsample size.
    pub b_h: usize,
    /// Inner iterations per epoch.
    pub m: usize,
    /// Correction pairs kept.
    pub memory: usize,
    /// Inner iterations between curvature updates.
    pub upsilon: usize,
    pub eta: f64,
    /// Stop once consecutive outer objectives differ by less than this.
    pub epsilon: f64,
    pub outer: OuterOption,
    pub beta: f64,
    pub curvature: CurvatureMode,
    pub anchor: AnchorMode,
    pub sampling: SamplingMode,
    pub seed: u64,
    pub max_epochs: usize,
    /// Stop once this many data passes have been spent.
    pub max_data_passes: Option<f64>,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Discard the first correction pair, which is anchored at the origin.
    pub skip_first_pair: bool,
    /// Standard deviation of the Gaussian starting point; 0 starts at the origin.
    pub init_scale: f64,
}

impl SolverConfig {
    /// Defaults for a dataset of `n` examples: `b = ceil(sqrt n)`,
    /// `upsilon = 10`, `memory = 10`, `b_h = b * upsilon` (at most `n`),
    /// `m = ceil(n / b)`, `eta = 1e-2`, `beta = 1/2`, option IV, L-BFGS
    /// curvature, exact anchors and smoothness-proportional sampling.
    pub fn defaults_for(n: usize) -> Self {
        let n = n.max(1);
        let b = (n as f64).sqrt().ceil() as usize;
        let upsilon = 10;
        Self {
            b,
            b_h: (b * upsilon).min(n),
            m: n.div_ceil(b),
            memory: 10,
            upsilon,
            eta: 1e-2,
            epsilon: 1e-12,
            outer: OuterOption::GeometricAverage,
            beta: 0.5,
            curvature: CurvatureMode::Lbfgs,
            anchor: AnchorMode::Full,
            sampling: SamplingMode::Lipschitz,
            seed: 0,
            max_epochs: 100,
            max_data_passes: None,
            cg_tol: 1e-4,
            cg_max_iter: 25,
            skip_first_pair: false,
            init_scale: 0.0,
        }
    }

    /// Anchor schedule constants `zeta = n / 3^8`, `growth = 3`.
    pub fn standard_subsampled_anchor(n: usize) -> AnchorMode {
        AnchorMode::Subsampled {
            zeta: n as f64 / 3f64.powi(8),
            growth: 3.0,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let positive = [
            ("b", self.b),
            ("b_h", self.b_h),
            ("m", self.m),
            ("memory", self.memory),
            ("upsilon", self.upsilon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(invalid(format!("eta = {} must be finite and >= 0", self.eta)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(invalid(format!("beta = {} is outside (0, 1]", self.beta)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(invalid("epsilon must be >= 0"));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(invalid("init_scale must be finite and >= 0"));
        }
        if self.b_h > n {
            return Err(invalid(format!("b_h = {} exceeds n = {n}", self.b_h)));
        }
        if let CurvatureMode::Block { blocks } = self.curvature {
            if blocks == 0 || blocks > n {
                return Err(invalid(format!("block count {blocks} must be in 1..={n}")));
            }
            if !(self.cg_tol > 0.0) || self.cg_max_iter == 0 {
                return Err(invalid("CG tolerance and iteration cap must be positive"));
            }
        }
        if let AnchorMode::Subsampled { zeta, growth } = self.anchor {
            if !(zeta > 0.0) || !(growth > 1.0) {
                return Err(invalid("subsampled anchors need zeta > 0 and growth > 1"));
            }
        }
        if let Some(p) = self.max_data_passes {
            if !(p > 0.0) {
                return Err(invalid("max_data_passes must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_problem_size() {
        let c = SolverConfig::defaults_for(400);
        assert_eq!((c.b, c.b_h, c.m, c.memory, c.upsilon), (20, 200, 20, 10, 10));
        let c = SolverConfig::defaults_for(50);
        assert_eq!((c.b, c.b_h, c.m), (8, 50, 7));
        assert!(c.validate(50).is_ok());
    }

    #[test]
    fn rejects_invalid_fields() {
        let mut c = SolverConfig::defaults_for(10);
        c.beta = 0.0;
        assert!(c.validate(10).is_err());
        let mut c = SolverConfig::defaults_for(10);
        c.b = 0;
        assert!(c.validate(10).is_err());
        let mut c = SolverConfig::defaults_for(10);
        c.curvature = CurvatureMode::Block { blocks: 11 };
        assert!(c.validate(10).is_err());
    }

    #[test]
    fn outer_option_names_round_trip() {
        for o in OuterOption::ALL {
            assert_eq!(o.to_string().parse::<OuterOption>().unwrap(), o);
            let j = serde_json::to_string(&o).unwrap();
            assert_eq!(serde_json::from_str::<OuterOption>(&j).unwrap(), o);
        }
        assert!("5".parse::<OuterOption>().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let mut c = SolverConfig::defaults_for(100);
        c.curvature = CurvatureMode::Block { blocks: 5 };
        c.anchor = SolverConfig::standard_subsampled_anchor(100);
        let j = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<SolverConfig>(&j).unwrap(), c);
    }
}
