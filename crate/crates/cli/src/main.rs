mod experiment;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{Map, Value};
use sqnkit::checks::{run_checks, CheckLevel, CheckOptions};
use sqnkit::dataio::{reference_optimum, write_libsvm, ReferenceSolution};
use sqnkit::problem::ErmProblem;
use sqnkit::solver::{run, theory_report, SolverConfig, Trace};

use experiment::{
    build_config, ensure, load_dataset, load_problem, threads_from_env, usage, vary_overlay, ExperimentSpec,
    ProblemArgs, ProblemSetup, SolverArgs, UsageError,
};

#[derive(Parser)]
#[command(name = "sqnkit", version, about = "Stochastic L-BFGS with variance reduction: runs, comparisons and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solver once and write the per-epoch trace.
    Run(RunArgs),
    /// Run several variants on one problem and merge their traces.
    Compare(CompareArgs),
    /// Run the diagnostic suite; exits 1 if any check fails.
    Check(CheckArgs),
    /// Write a synthetic dataset in libsvm format.
    Synth(SynthArgs),
    /// Compute a high-accuracy reference optimum.
    Reference(ReferenceArgs),
}

#[derive(clap::Args)]
struct ReferenceOpts {
    /// Precomputed reference optimum (JSON) instead of solving for one.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Gradient-norm tolerance of the reference solve.
    #[arg(long, default_value_t = 1e-10)]
    reference_tol: f64,
    /// Skip the reference; suboptimality columns stay empty.
    #[arg(long, conflicts_with = "reference")]
    no_reference: bool,
}

#[derive(clap::Args)]
struct RunArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    reference: ReferenceOpts,
    /// Output directory for trace.csv, trace.json and theory.json. Without
    /// it the CSV goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    reference: ReferenceOpts,
    /// Sweep one configuration field, e.g. `outer=1,2,3,4,last` or
    /// `curvature=identity,lbfgs,block`. Repeatable.
    #[arg(long)]
    vary: Vec<String>,
    /// Variant described by a JSON spec file. Repeatable.
    #[arg(long)]
    spec: Vec<PathBuf>,
    /// Merged CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

#[derive(clap::Args)]
struct CheckArgs {
    #[arg(long, value_enum, default_value = "fast")]
    level: LevelArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Admit pairs that fail the curvature guard (negative-path test hook).
    #[arg(long, hide = true)]
    bypass_curvature_guard: bool,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Output libsvm file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReferenceArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Output JSON path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Check(a) => cmd_check(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Reference(a) => cmd_reference(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

/// 2 for usage, input and I/O problems; 1 for solver failures.
fn exit_code_for(e: &anyhow::Error) -> ExitCode {
    if e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<io::Error>().is_some() {
        return ExitCode::from(2);
    }
    match e.downcast_ref::<sqnkit::Error>() {
        Some(sqnkit::Error::Diverged { .. })
        | Some(sqnkit::Error::IterationLimit { .. })
        | Some(sqnkit::Error::NonFinite(_)) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn obtain_reference(problem: &ErmProblem, opts: &ReferenceOpts) -> Result<Option<ReferenceSolution>> {
    if opts.no_reference {
        return Ok(None);
    }
    if let Some(path) = &opts.reference {
        ensure(path.exists(), format!("reference file not found: {}", path.display()))?;
        let r = ReferenceSolution::load(path).map_err(|e| usage(format!("invalid reference {}: {e}", path.display())))?;
        ensure(
            r.x_star.len() == problem.dim(),
            format!("reference has dimension {} but the problem has {}", r.x_star.len(), problem.dim()),
        )?;
        return Ok(Some(r));
    }
    Ok(Some(reference_optimum(problem, opts.reference_tol)?))
}

fn base_overlays(solver: &SolverArgs, n: usize) -> Result<(Option<Map<String, Value>>, Map<String, Value>)> {
    Ok((solver.file_overlay()?, solver.overlay(n)?))
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let setup = a.problem.require_setup()?;
    let problem = load_problem(&setup)?;
    let n = problem.n();
    let (file, flags) = base_overlays(&a.solver, n)?;
    let mut layers: Vec<&Map<String, Value>> = file.iter().collect();
    layers.push(&flags);
    let config = build_config(n, &layers)?;
    let reference = obtain_reference(&problem, &a.reference)?;
    let out = run(&problem, &config, reference.as_ref().map(|r| r.f_star))?;
    let trace = &out.trace;

    let summary = summarize(trace);
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            trace.write_csv(BufWriter::new(File::create(dir.join("trace.csv"))?))?;
            fs::write(dir.join("trace.json"), trace.to_json()?)?;
            fs::write(dir.join("theory.json"), serde_json::to_string_pretty(&theory_report(&problem, &config))?)?;
            if let Some(r) = &reference {
                r.save(dir.join("reference.json"))?;
            }
            println!("{summary}");
        }
        None => {
            trace.write_csv(io::stdout().lock())?;
            eprintln!("{summary}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn summarize(trace: &Trace) -> String {
    let last = trace.last();
    let subopt = last.subopt.map_or("n/a".to_string(), |s| format!("{s:.6e}"));
    format!(
        "final suboptimality {subopt} after {} epochs, {:.2} data passes ({:?})",
        last.epoch, last.data_passes, trace.termination
    )
}

struct Variant {
    name: String,
    config: SolverConfig,
}

fn cmd_compare(a: CompareArgs) -> Result<ExitCode> {
    let specs: Vec<(String, ExperimentSpec)> = a
        .spec
        .iter()
        .map(|p| {
            let spec = ExperimentSpec::load(p)?;
            let name = spec.name.clone().unwrap_or_else(|| {
                p.file_stem().map_or("spec".into(), |s| s.to_string_lossy().into_owned())
            });
            Ok((name, spec))
        })
        .collect::<Result<_>>()?;

    let mut setup: Option<ProblemSetup> = a.problem.setup()?;
    for (name, spec) in &specs {
        if let Some(s) = spec.setup()? {
            match &setup {
                None => setup = Some(s),
                Some(existing) if *existing != s => {
                    return Err(usage(format!("variant '{name}' uses a different dataset or objective")));
                }
                Some(_) => {}
            }
        }
    }
    let setup = setup.ok_or_else(|| usage("no dataset: give --data/--synth or put one in the specs"))?;
    let problem = load_problem(&setup)?;
    let n = problem.n();
    let (file, flags) = base_overlays(&a.solver, n)?;

    let mut variants = Vec::new();
    let layers_for = |extra: &Map<String, Value>| -> Result<SolverConfig> {
        let mut layers: Vec<&Map<String, Value>> = file.iter().collect();
        layers.push(extra);
        layers.push(&flags);
        build_config(n, &layers)
    };
    for v in &a.vary {
        let (key, values) = v
            .split_once('=')
            .ok_or_else(|| usage(format!("--vary expects key=v1,v2,..., got '{v}'")))?;
        for value in values.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let overlay = vary_overlay(key, value, n)?;
            variants.push(Variant {
                name: format!("{key}={value}"),
                config: layers_for(&overlay)?,
            });
        }
    }
    for (name, spec) in &specs {
        variants.push(Variant {
            name: name.clone(),
            config: layers_for(&spec.config)?,
        });
    }
    ensure(variants.len() >= 2, "compare needs at least two variants (--vary or --spec)")?;
    let mut seen = std::collections::HashSet::new();
    for v in &variants {
        ensure(seen.insert(v.name.clone()), format!("duplicate variant name '{}'", v.name))?;
    }

    let reference = obtain_reference(&problem, &a.reference)?;
    let f_star = reference.as_ref().map(|r| r.f_star);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads_from_env()? {
        pool = pool.num_threads(t);
    }
    let pool = pool.build()?;
    let results: Vec<(String, Result<Trace>)> = pool.install(|| {
        variants
            .par_iter()
            .map(|v| (v.name.clone(), run(&problem, &v.config, f_star).map(|o| o.trace).map_err(Into::into)))
            .collect()
    });

    let mut rows = Vec::new();
    let mut failed = false;
    for (name, res) in &results {
        match res {
            Ok(trace) => {
                eprintln!("{name}: {}", summarize(trace));
                for r in &trace.records {
                    rows.push((name.clone(), r.epoch, r.data_passes, r.subopt));
                }
            }
            Err(e) => {
                eprintln!("{name}: failed: {e:#}");
                failed = true;
            }
        }
    }
    rows.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["variant", "epoch", "data_passes", "subopt"])?;
    for (name, epoch, passes, subopt) in rows {
        w.write_record([
            name,
            epoch.to_string(),
            passes.to_string(),
            subopt.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_check(a: CheckArgs) -> Result<ExitCode> {
    let opts = CheckOptions {
        level: match a.level {
            LevelArg::Fast => CheckLevel::Fast,
            LevelArg::Full => CheckLevel::Full,
        },
        seed: a.seed,
        bypass_curvature_guard: a.bypass_curvature_guard,
    };
    let results = run_checks(&opts);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{}  {:width$}  {:>9.1} ms  {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.elapsed_ms,
            r.detail
        );
        if !r.pass {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    ensure(a.problem.data.is_none(), "synth takes --synth, not --data")?;
    let setup = a.problem.require_setup()?;
    let task = match setup.loss {
        sqnkit::problem::Loss::Logistic => sqnkit::dataio::Task::Classification,
        sqnkit::problem::Loss::Ridge => sqnkit::dataio::Task::Regression,
    };
    let ds = load_dataset(&setup.source, task)?;
    match &a.out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            write_libsvm(&ds, &mut w)?;
            w.flush()?;
            eprintln!("wrote {} examples, dimension {} to {}", ds.n(), ds.dim(), p.display());
        }
        None => write_libsvm(&ds, io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_reference(a: ReferenceArgs) -> Result<ExitCode> {
    let setup = a.problem.require_setup()?;
    let problem = load_problem(&setup)?;
    let r = reference_optimum(&problem, a.tol)?;
    match &a.out {
        Some(p) => {
            r.save(p)?;
            println!("f* = {:.16e}, |grad f| = {:.3e}", r.f_star, r.grad_norm);
        }
        None => println!("{}", serde_json::to_string_pretty(&r)?),
    }
    Ok(ExitCode::SUCCESS)
}
