//! Problem loading and layered solver configuration: defaults for `n`,
//! then a JSON file, then per-variant overrides, then flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sqnkit::dataio::{read_libsvm_file, synthesize, Conditioning, Dataset, ParseOptions, SynthSpec, Task};
use sqnkit::problem::{ErmProblem, Loss};
use sqnkit::solver::{OuterOption, SolverConfig};

/// Usage and input errors map to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    Logistic,
    Ridge,
}

impl From<LossArg> for Loss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Logistic => Loss::Logistic,
            LossArg::Ridge => Loss::Ridge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CurvatureArg {
    Identity,
    Lbfgs,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnchorArg {
    Full,
    Subsampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Uniform,
    Lipschitz,
}

/// Where the examples come from and which objective they define.
#[derive(Debug, Clone, Default, Args)]
pub struct ProblemArgs {
    /// libsvm file.
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Feature dimension override for --data.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Synthetic data as `n,d,density,kind` with kind `well` or `ill`.
    #[arg(long)]
    pub synth: Option<String>,
    /// Seed of the synthetic generator.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Per-example loss (default logistic).
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Regularization weight; defaults to 1/n.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    File {
        path: PathBuf,
        dim: Option<usize>,
    },
    Synth {
        n: usize,
        d: usize,
        density: f64,
        conditioning: Conditioning,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSetup {
    pub source: DataSource,
    pub loss: Loss,
    pub lambda: Option<f64>,
}

pub fn parse_synth(text: &str, seed: u64) -> Result<DataSource> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [n, d, density, kind] = parts.as_slice() else {
        return Err(usage(format!("--synth expects n,d,density,kind, got '{text}'")));
    };
    let conditioning = match *kind {
        "well" | "well_conditioned" => Conditioning::Well,
        "ill" | "ill_conditioned" => Conditioning::Ill,
        other => return Err(usage(format!("unknown synthetic kind '{other}' (use well or ill)"))),
    };
    let bad = |what: &str| usage(format!("invalid {what} in --synth '{text}'"));
    Ok(DataSource::Synth {
        n: n.parse().map_err(|_| bad("n"))?,
        d: d.parse().map_err(|_| bad("d"))?,
        density: density.parse().map_err(|_| bad("density"))?,
        conditioning,
        seed,
    })
}

impl ProblemArgs {
    /// `None` when neither --data nor --synth was given.
    pub fn setup(&self) -> Result<Option<ProblemSetup>> {
        let source = match (&self.data, &self.synth) {
            (Some(path), _) => DataSource::File {
                path: path.clone(),
                dim: self.dim,
            },
            (None, Some(s)) => parse_synth(s, self.data_seed)?,
            (None, None) => return Ok(None),
        };
        Ok(Some(ProblemSetup {
            source,
            loss: self.loss.unwrap_or(LossArg::Logistic).into(),
            lambda: self.lambda,
        }))
    }

    pub fn require_setup(&self) -> Result<ProblemSetup> {
        self.setup()?.ok_or_else(|| usage("one of --data or --synth is required"))
    }
}

fn task_for(loss: Loss) -> Task {
    match loss {
        Loss::Logistic => Task::Classification,
        Loss::Ridge => Task::Regression,
    }
}

pub fn load_dataset(source: &DataSource, task: Task) -> Result<Dataset> {
    match source {
        DataSource::File { path, dim } => {
            if !path.exists() {
                return Err(usage(format!("dataset not found: {}", path.display())));
            }
            let opts = ParseOptions {
                dim: *dim,
                task: Some(task),
            };
            let ds = read_libsvm_file(path, &opts)
                .map_err(|e| usage(format!("cannot read dataset {}: {e}", path.display())))?;
            Ok(ds.normalize_rows())
        }
        DataSource::Synth {
            n,
            d,
            density,
            conditioning,
            seed,
        } => synthesize(&SynthSpec {
            n: *n,
            d: *d,
            density: *density,
            conditioning: *conditioning,
            task,
            seed: *seed,
        })
        .map_err(|e| usage(format!("invalid synthetic spec: {e}"))),
    }
}

pub fn load_problem(setup: &ProblemSetup) -> Result<ErmProblem> {
    let ds = load_dataset(&setup.source, task_for(setup.loss))?;
    let problem = match setup.lambda {
        Some(l) => ErmProblem::new(ds, setup.loss, l),
        None => ErmProblem::with_default_lambda(ds, setup.loss),
    };
    problem.map_err(|e| usage(format!("invalid problem: {e}")))
}

fn parse_outer(s: &str) -> std::result::Result<OuterOption, String> {
    s.parse().map_err(|e: sqnkit::Error| e.to_string())
}

/// Solver flags; each maps onto the configuration field of the same name.
#[derive(Debug, Clone, Default, Args)]
pub struct SolverArgs {
    /// JSON object with any subset of the solver configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Minibatch size (default ceil(sqrt n)).
    #[arg(long)]
    pub b: Option<usize>,
    /// Hessian subsample size (default b * upsilon, at most n).
    #[arg(long)]
    pub bh: Option<usize>,
    /// Inner iterations per epoch (default ceil(n / b)).
    #[arg(long)]
    pub m: Option<usize>,
    /// Correction pairs kept (default 10).
    #[arg(long)]
    pub memory: Option<usize>,
    /// Inner iterations between curvature updates (default 10).
    #[arg(long)]
    pub upsilon: Option<usize>,
    /// Step size (default 0.01).
    #[arg(long)]
    pub eta: Option<f64>,
    /// Stop once consecutive outer objectives differ by less than this.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Outer iterate rule: 1, 2, 3, 4 or last.
    #[arg(long, value_parser = parse_outer)]
    pub outer: Option<OuterOption>,
    /// Geometric weight of options 3 and 4, in (0, 1] (default 0.5).
    #[arg(long)]
    pub beta: Option<f64>,
    /// Metric used to precondition the inner steps.
    #[arg(long, value_enum)]
    pub curvature: Option<CurvatureArg>,
    /// Block count for --curvature block (default 5).
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Anchor gradient: exact every epoch, or on a growing subsample.
    #[arg(long, value_enum)]
    pub anchor: Option<AnchorArg>,
    /// Initial anchor size for --anchor subsampled (default n / 3^8).
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Growth factor of the anchor size per epoch (default 3).
    #[arg(long)]
    pub upsilon_growth: Option<f64>,
    /// Minibatch sampling distribution.
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
    /// Seed of every solver random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epoch cap (default 100).
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Stop after this many data passes.
    #[arg(long)]
    pub max_passes: Option<f64>,
    /// Standard deviation of a Gaussian starting point (0 = origin).
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Relative residual target of the block-mode CG solve.
    #[arg(long)]
    pub cg_tol: Option<f64>,
    /// Iteration cap of the block-mode CG solve.
    #[arg(long)]
    pub cg_max_iter: Option<usize>,
}

const DEFAULT_BLOCKS: usize = 5;

fn curvature_value(mode: &str, blocks: Option<usize>) -> Result<Value> {
    Ok(match mode {
        "identity" => json!({"mode": "identity"}),
        "lbfgs" => json!({"mode": "lbfgs"}),
        "block" => json!({"mode": "block", "blocks": blocks.unwrap_or(DEFAULT_BLOCKS)}),
        other => {
            if let Some(k) = other.strip_prefix("block") {
                let k: usize = k.parse().map_err(|_| usage(format!("unknown curvature mode '{other}'")))?;
                json!({"mode": "block", "blocks": k})
            } else {
                return Err(usage(format!("unknown curvature mode '{other}'")));
            }
        }
    })
}

fn anchor_value(mode: &str, zeta: Option<f64>, growth: Option<f64>, n: usize) -> Result<Value> {
    Ok(match mode {
        "full" => json!({"mode": "full"}),
        "subsampled" => json!({
            "mode": "subsampled",
            "zeta": zeta.unwrap_or(n as f64 / 3f64.powi(8)),
            "growth": growth.unwrap_or(3.0),
        }),
        other => return Err(usage(format!("unknown anchor mode '{other}'"))),
    })
}

impl SolverArgs {
    pub fn overlay(&self, n: usize) -> Result<Map<String, Value>> {
        let mut o = Map::new();
        let mut put = |k: &str, v: Value| {
            o.insert(k.to_string(), v);
        };
        macro_rules! plain {
            ($($field:ident => $key:literal),*) => {
                $(if let Some(v) = self.$field { put($key, json!(v)); })*
            };
        }
        plain!(b => "b", bh => "b_h", m => "m", memory => "memory", upsilon => "upsilon",
            eta => "eta", epsilon => "epsilon", beta => "beta", seed => "seed",
            max_epochs => "max_epochs", max_passes => "max_data_passes",
            init_scale => "init_scale", cg_tol => "cg_tol", cg_max_iter => "cg_max_iter");
        if let Some(o) = self.outer {
            put("outer", json!(o));
        }
        match (self.curvature, self.blocks) {
            (Some(CurvatureArg::Identity), _) => put("curvature", curvature_value("identity", None)?),
            (Some(CurvatureArg::Lbfgs), _) => put("curvature", curvature_value("lbfgs", None)?),
            (Some(CurvatureArg::Block), k) | (None, k @ Some(_)) => put("curvature", curvature_value("block", k)?),
            (None, None) => {}
        }
        match self.anchor {
            Some(AnchorArg::Full) => put("anchor", anchor_value("full", None, None, n)?),
            Some(AnchorArg::Subsampled) => put("anchor", anchor_value("subsampled", self.zeta, self.upsilon_growth, n)?),
            None if self.zeta.is_some() || self.upsilon_growth.is_some() => {
                put("anchor", anchor_value("subsampled", self.zeta, self.upsilon_growth, n)?)
            }
            None => {}
        }
        if let Some(s) = self.sampling {
            put(
                "sampling",
                json!(match s {
                    SamplingArg::Uniform => "uniform",
                    SamplingArg::Lipschitz => "lipschitz",
                }),
            );
        }
        Ok(o)
    }

    pub fn file_overlay(&self) -> Result<Option<Map<String, Value>>> {
        self.config.as_deref().map(read_overlay).transpose()
    }
}

pub fn read_overlay(path: &Path) -> Result<Map<String, Value>> {
    if !path.exists() {
        return Err(usage(format!("config file not found: {}", path.display())));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(usage(format!("{} must hold a JSON object", path.display()))),
        Err(e) => Err(usage(format!("invalid JSON in {}: {e}", path.display()))),
    }
}

/// Applies `overlays` in order over the defaults for `n`. A changed
/// minibatch size or update period re-derives `m` and `b_h` unless those
/// were set explicitly.
pub fn build_config(n: usize, overlays: &[&Map<String, Value>]) -> Result<SolverConfig> {
    let defaults = SolverConfig::defaults_for(n);
    let Value::Object(mut merged) = serde_json::to_value(&defaults)? else {
        unreachable!("configuration serializes to an object");
    };
    let mut set = std::collections::HashSet::new();
    for o in overlays {
        for (k, v) in o.iter() {
            if !merged.contains_key(k) {
                return Err(usage(format!("unknown configuration field '{k}'")));
            }
            merged.insert(k.clone(), v.clone());
            set.insert(k.as_str());
        }
    }
    let mut config: SolverConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid configuration: {e}")))?;
    if set.contains("b") && !set.contains("m") {
        config.m = n.div_ceil(config.b.max(1));
    }
    if (set.contains("b") || set.contains("upsilon")) && !set.contains("b_h") {
        config.b_h = (config.b * config.upsilon).min(n);
    }
    config
        .validate(n)
        .map_err(|e| usage(format!("invalid configuration: {e}")))?;
    Ok(config)
}

/// One value of a `--vary key=v1,v2,...` sweep as a configuration overlay.
pub fn vary_overlay(key: &str, value: &str, n: usize) -> Result<Map<String, Value>> {
    let mut o = Map::new();
    let v = match key {
        "outer" => json!(value.parse::<OuterOption>().map_err(|e| usage(e.to_string()))?),
        "curvature" => curvature_value(value, None)?,
        "anchor" => anchor_value(value, None, None, n)?,
        "sampling" => json!(value),
        "bh" => return vary_overlay("b_h", value, n),
        _ => serde_json::from_str(value).map_err(|_| usage(format!("cannot parse '{value}' for '{key}'")))?,
    };
    o.insert(key.to_string(), v);
    Ok(o)
}

/// A comparison variant read from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: Option<String>,
    pub data: Option<PathBuf>,
    pub dim: Option<usize>,
    pub synth: Option<String>,
    #[serde(default)]
    pub data_seed: u64,
    pub loss: Option<LossArg>,
    pub lambda: Option<f64>,
    #[serde(default)]
    pub config: Map<String, Value>,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(usage(format!("spec file not found: {}", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid spec {}: {e}", path.display())))
    }

    /// The problem this spec names, if it names one.
    pub fn setup(&self) -> Result<Option<ProblemSetup>> {
        ProblemArgs {
            data: self.data.clone(),
            dim: self.dim,
            synth: self.synth.clone(),
            data_seed: self.data_seed,
            loss: self.loss,
            lambda: self.lambda,
        }
        .setup()
    }
}

pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("SQNKIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .map(Some)
            .ok_or_else(|| anyhow!("SQNKIT_THREADS must be a positive integer, got '{v}'")),
        Err(_) => Ok(None),
    }
}

pub fn ensure(cond: bool, msg: impl Into<String>) -> Result<()> {
    if !cond {
        bail!(UsageError(msg.into()));
    }
    Ok(())
}
