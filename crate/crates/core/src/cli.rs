//! `evoline` command line.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 environment error
//! (missing files, unusable run directory, worker spawn failure), 4 run
//! aborted.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::config::{Algorithm, EvaluatorSpec, RunConfig, SearchSpace};
use crate::de::{evolve_from, DEConfig, MutationScheme};
use crate::engine::{
    BoxProblem, EngineError, FailureRecord, GenerationRecord, GenerationSink, Individual,
    Population, Problem, RunOptions, RunResult, SpaceProblem,
};
use crate::fitness::{cached, rastrigin, sphere, Evaluator, SurrogateEvaluator};
use crate::ga::evolve_ga_from;
use crate::hyperspace::{compact_space, default_space, load_space, Domain};
use crate::runlog::{self, open_run, RunLog, RunLogError};
use crate::worker::WorkerPool;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ENVIRONMENT: i32 = 3;
pub const EXIT_ABORT: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Environment(String),
    #[error("run aborted: {0}")]
    Abort(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Environment(_) => EXIT_ENVIRONMENT,
            CliError::Abort(_) => EXIT_ABORT,
        }
    }
}

impl From<RunLogError> for CliError {
    fn from(e: RunLogError) -> Self {
        match e {
            RunLogError::TooFewRuns(_) => CliError::Usage(e.to_string()),
            _ => CliError::Environment(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::Space(_) => CliError::Usage(e.to_string()),
            EngineError::Checkpoint(_) => CliError::Environment(e.to_string()),
            EngineError::InitAborted { .. } | EngineError::Sink(_) => CliError::Abort(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "evoline",
    version,
    about = "Differential evolution hyperparameter search for fixed-topology CNNs",
    after_help = "Exit codes: 0 ok, 2 usage, 3 environment, 4 run aborted.\n\
                  Set EVOLINE_LOG=error|warn|info|debug for logs on standard error."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the default search-space document for editing.
    SpaceInit(SpaceInitArgs),
    /// Run DE or the GA baseline into a new run directory.
    Optimize(Box<OptimizeArgs>),
    /// Continue an interrupted run from its last completed generation.
    Resume(ResumeArgs),
    /// Build the report bundle for a completed run.
    Report(ReportArgs),
    /// Tabulate completed runs (or directories of runs) by best fitness.
    Compare(CompareArgs),
    /// Run DE on a continuous benchmark and print the best value found.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Template {
    /// VGG-16 per-block space (15 genes)
    Vgg16,
    /// Six global genes
    Compact,
}

#[derive(Debug, Args)]
pub struct SpaceInitArgs {
    /// Output path.
    pub out: PathBuf,
    /// Overwrite an existing file.
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_enum, default_value_t = Template::Vgg16)]
    pub template: Template,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    De,
    Ga,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Layerwise,
    Rand1,
}

impl From<SchemeArg> for MutationScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Layerwise => MutationScheme::Layerwise,
            SchemeArg::Rand1 => MutationScheme::StandardRand1,
        }
    }
}

/// Unset flags fall back to the `--config` file, then to built-in defaults
/// (shown in brackets).
#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Configuration file with the same schema as a run's config.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Search algorithm [default: de]
    #[arg(long, value_enum)]
    pub algo: Option<AlgoArg>,
    /// Space document [default: built-in VGG-16 space; ignored for sphere/rastrigin]
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// surrogate | sphere | rastrigin | worker:<command line> [default: surrogate]
    #[arg(long)]
    pub evaluator: Option<EvaluatorSpec>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Population size [default: 10 for de, 15 for ga]
    #[arg(long)]
    pub pop: Option<usize>,
    /// Number of generations [default: 10]
    #[arg(long)]
    pub gens: Option<u64>,
    /// DE scale factor F in (0, 1] [default: 0.6]
    #[arg(long = "f")]
    pub scale_factor: Option<f64>,
    /// DE crossover rate CR in [0, 1] [default: 0.9]
    #[arg(long = "cr")]
    pub crossover_rate: Option<f64>,
    /// DE donor construction [default: rand1]
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// GA crossover probability [default: 0.9]
    #[arg(long)]
    pub crossover_prob: Option<f64>,
    /// GA per-gene reset probability [default: 0.1]
    #[arg(long)]
    pub mutation_prob: Option<f64>,
    /// GA tournament size [default: 3]
    #[arg(long)]
    pub tournament: Option<usize>,
    /// GA elites carried over per generation [default: 1]
    #[arg(long)]
    pub elitism: Option<usize>,
    /// Concurrent evaluations (worker processes for worker:) [default: 1]
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Training epochs passed to evaluators [default: 1]
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Seed of the surrogate's hidden optimum [default: 0]
    #[arg(long)]
    pub surrogate_seed: Option<u64>,
    /// Worker per-request timeout in seconds [default: 600]
    #[arg(long)]
    pub timeout: Option<u64>,
    /// Worker restarts before giving up on it [default: 2]
    #[arg(long)]
    pub max_restarts: Option<u32>,
    /// Treat worker scores as reproducible (enables caching)
    #[arg(long)]
    pub worker_deterministic: bool,
    /// Disable evaluation caching
    #[arg(long)]
    pub no_cache: bool,
    /// Record 0 instead of elapsed time in history.csv
    #[arg(long)]
    pub no_wallclock: bool,
    /// Dimensions of the sphere/rastrigin box [default: 10]
    #[arg(long)]
    pub dims: Option<usize>,
    /// Half-width of the sphere/rastrigin box [default: 5.12]
    #[arg(long)]
    pub bound: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    pub run_dir: PathBuf,
    /// Concurrent evaluations [default: the run's setting]
    #[arg(long)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub run_dir: PathBuf,
    /// Output directory [default: <run_dir>/report]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories, or directories holding several runs.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "compare")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchFunction {
    Sphere,
    Rastrigin,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchFunction::Sphere)]
    pub function: BenchFunction,
    #[arg(long, default_value_t = 10)]
    pub dims: usize,
    #[arg(long, default_value_t = 20)]
    pub pop: usize,
    #[arg(long, default_value_t = 200)]
    pub gens: u64,
    #[arg(long = "f", default_value_t = 0.6)]
    pub scale_factor: f64,
    #[arg(long = "cr", default_value_t = 0.9)]
    pub crossover_rate: f64,
    #[arg(long, value_enum, default_value_t = SchemeArg::Rand1)]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Box is [-bound, bound] per dimension.
    #[arg(long, default_value_t = 5.12)]
    pub bound: f64,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("evoline: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    match command {
        Command::SpaceInit(a) => cmd_space_init(&a, out),
        Command::Optimize(a) => cmd_optimize(&a, out).map(|_| ()),
        Command::Resume(a) => cmd_resume(&a, out).map(|_| ()),
        Command::Report(a) => cmd_report(&a, out),
        Command::Compare(a) => cmd_compare(&a, out),
        Command::Bench(a) => cmd_bench(&a, out).map(|_| ()),
    }
}

fn emit(out: &mut dyn std::io::Write, line: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::Environment(format!("stdout: {e}")))
}

pub fn cmd_space_init(a: &SpaceInitArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    if a.out.exists() && !a.force {
        return Err(CliError::Environment(format!(
            "{} exists; pass --force to overwrite",
            a.out.display()
        )));
    }
    let space = match a.template {
        Template::Vgg16 => default_space(),
        Template::Compact => compact_space(),
    };
    runlog::write_atomic(&a.out, space.to_document().as_bytes())
        .map_err(|e| CliError::Environment(e.to_string()))?;
    emit(out, format_args!("wrote {}", a.out.display()))
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Layers flags over the config file over defaults.
pub fn effective_config(a: &OptimizeArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Environment(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(algo) = a.algo {
        cfg.algorithm = match algo {
            AlgoArg::De => Algorithm::De,
            AlgoArg::Ga => Algorithm::Ga,
        };
    }
    let de_only = [
        ("--f", a.scale_factor.is_some()),
        ("--cr", a.crossover_rate.is_some()),
        ("--scheme", a.scheme.is_some()),
    ];
    let ga_only = [
        ("--crossover-prob", a.crossover_prob.is_some()),
        ("--mutation-prob", a.mutation_prob.is_some()),
        ("--tournament", a.tournament.is_some()),
        ("--elitism", a.elitism.is_some()),
    ];
    let (misplaced, algo) = match cfg.algorithm {
        Algorithm::De => (&ga_only[..], "de"),
        Algorithm::Ga => (&de_only[..], "ga"),
    };
    if let Some((flag, _)) = misplaced.iter().find(|(_, set)| *set) {
        return Err(usage(format!("{flag} does not apply to --algo {algo}")));
    }

    if let Some(e) = &a.evaluator {
        cfg.evaluator = e.clone();
    }
    if let Some(seed) = a.seed {
        cfg.de.seed = seed;
        cfg.ga.seed = seed;
    }
    match cfg.algorithm {
        Algorithm::De => {
            let de = &mut cfg.de;
            if let Some(v) = a.pop {
                de.population_size = v;
            }
            if let Some(v) = a.gens {
                de.max_generations = v;
            }
            if let Some(v) = a.scale_factor {
                de.scale_factor = v;
            }
            if let Some(v) = a.crossover_rate {
                de.crossover_rate = v;
            }
            if let Some(v) = a.scheme {
                de.mutation_scheme = v.into();
            }
        }
        Algorithm::Ga => {
            let ga = &mut cfg.ga;
            if let Some(v) = a.pop {
                ga.population_size = v;
            }
            if let Some(v) = a.gens {
                ga.max_generations = v;
            }
            if let Some(v) = a.crossover_prob {
                ga.crossover_prob = v;
            }
            if let Some(v) = a.mutation_prob {
                ga.mutation_prob = v;
            }
            if let Some(v) = a.tournament {
                ga.tournament_size = v;
            }
            if let Some(v) = a.elitism {
                ga.elitism_count = v;
            }
        }
    }
    if let Some(v) = a.parallel {
        if v == 0 {
            return Err(usage("--parallel must be at least 1"));
        }
        cfg.worker.parallel_workers = v;
    }
    if let Some(v) = a.epochs {
        cfg.budget.epochs = v;
    }
    if let Some(v) = a.surrogate_seed {
        cfg.surrogate_seed = v;
    }
    if let Some(v) = a.timeout {
        cfg.worker.timeout_secs = v;
    }
    if let Some(v) = a.max_restarts {
        cfg.worker.max_restarts = v;
    }
    if a.worker_deterministic {
        cfg.worker_deterministic = true;
    }
    if a.no_cache {
        cfg.cache = false;
    }
    if a.no_wallclock {
        cfg.record_wallclock = false;
    }
    if let Some(v) = a.dims {
        cfg.continuous.dims = v;
    }
    if let Some(v) = a.bound {
        cfg.continuous.bound = v;
    }
    cfg.budget.seed = cfg.seed();
    validate_config(&cfg)?;
    Ok(cfg)
}

fn validate_config(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.algorithm {
        Algorithm::De => cfg.de.validate()?,
        Algorithm::Ga => cfg.ga.validate()?,
    }
    if cfg.evaluator.is_continuous() {
        if cfg.continuous.dims == 0 {
            return Err(usage("--dims must be at least 1"));
        }
        if !(cfg.continuous.bound.is_finite() && cfg.continuous.bound > 0.0) {
            return Err(usage("--bound must be positive and finite"));
        }
    }
    if cfg.worker.parallel_workers == 0 {
        return Err(usage("parallel_workers must be at least 1"));
    }
    if cfg.worker.timeout_secs == 0 {
        return Err(usage("worker timeout must be positive"));
    }
    Ok(())
}

fn resolve_space(a: &OptimizeArgs, cfg: &RunConfig) -> Result<SearchSpace, CliError> {
    if cfg.evaluator.is_continuous() {
        if a.space.is_some() {
            return Err(usage(format!("--space does not apply to the {} evaluator", cfg.evaluator)));
        }
        return Ok(SearchSpace::continuous(&cfg.continuous));
    }
    match &a.space {
        None => Ok(SearchSpace::Discrete(default_space())),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Environment(format!("{}: {e}", path.display())))?;
            load_space(&text)
                .map(SearchSpace::Discrete)
                .map_err(|e| usage(format!("{}: {e}", path.display())))
        }
    }
}

/// Prints each generation and forwards it to the run log.
struct ProgressSink<'a> {
    log: &'a mut RunLog,
    out: &'a mut dyn std::io::Write,
}

impl GenerationSink for ProgressSink<'_> {
    fn record(
        &mut self,
        population: &Population,
        record: &GenerationRecord,
        failures: &[FailureRecord],
        best: &Individual,
    ) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
        self.log.append_generation(population, record, failures, best)?;
        writeln!(
            self.out,
            "generation {} best {:.6} mean {:.6} evals {}",
            record.generation, record.best_fitness, record.mean_fitness, record.evaluations
        )?;
        Ok(())
    }
}

fn build_evaluator(cfg: &RunConfig, space: &SearchSpace) -> Result<Box<dyn Evaluator>, CliError> {
    let base: Box<dyn Evaluator> = match &cfg.evaluator {
        EvaluatorSpec::Surrogate => {
            let s = space
                .as_discrete()
                .ok_or_else(|| usage("the surrogate evaluator needs a gene space"))?;
            Box::new(SurrogateEvaluator::new(s.clone(), cfg.surrogate_seed))
        }
        EvaluatorSpec::Worker(argv) => Box::new(
            WorkerPool::spawn(argv.clone(), cfg.worker.clone(), cfg.worker_deterministic)
                .map_err(|e| CliError::Environment(e.to_string()))?,
        ),
        EvaluatorSpec::Sphere | EvaluatorSpec::Rastrigin => {
            unreachable!("continuous evaluators run through BoxProblem")
        }
    };
    if cfg.cache && base.is_deterministic() {
        Ok(Box::new(cached(base).expect("deterministic evaluator is cacheable")))
    } else {
        Ok(base)
    }
}

/// Runs (or continues) `cfg` over `space`, logging into `log`, and writes
/// `best.json` on completion.
fn execute(
    cfg: &RunConfig,
    space: &SearchSpace,
    log: &mut RunLog,
    parallelism: usize,
    out: &mut dyn std::io::Write,
) -> Result<RunResult, CliError> {
    let opts = RunOptions {
        parallelism,
        record_wallclock: cfg.record_wallclock,
    };
    let checkpoint = log.checkpoint()?;
    let evaluator;
    let problem: Box<dyn Problem + '_> = match (&cfg.evaluator, space) {
        (EvaluatorSpec::Sphere, _) => Box::new(BoxProblem::new(space.domain(), sphere)),
        (EvaluatorSpec::Rastrigin, _) => Box::new(BoxProblem::new(space.domain(), rastrigin)),
        (_, SearchSpace::Discrete(s)) => {
            evaluator = build_evaluator(cfg, space)?;
            Box::new(SpaceProblem::new(s, evaluator.as_ref(), cfg.budget))
        }
        (_, SearchSpace::Continuous(_)) => {
            return Err(usage(format!("the {} evaluator needs a gene space", cfg.evaluator)))
        }
    };
    let result = {
        let mut sink = ProgressSink { log: &mut *log, out: &mut *out };
        match cfg.algorithm {
            Algorithm::De => evolve_from(problem.as_ref(), &cfg.de, &opts, &mut sink, checkpoint)?,
            Algorithm::Ga => evolve_ga_from(problem.as_ref(), &cfg.ga, &opts, &mut sink, checkpoint)?,
        }
    };
    log.finish(&result, &cfg.evaluator.to_string())?;
    emit(
        out,
        format_args!(
            "best {:.6} after {} generations, {} evaluations, {} failures",
            result.best.fitness.unwrap_or(f64::NAN),
            result.history.len(),
            result.evaluations,
            result.failures.len()
        ),
    )?;
    if let Some(p) = &result.best_phenotype {
        emit(out, format_args!("best phenotype {}", p.canonical_key()))?;
    }
    Ok(result)
}

pub fn cmd_optimize(a: &OptimizeArgs, out: &mut dyn std::io::Write) -> Result<RunResult, CliError> {
    let cfg = effective_config(a)?;
    let space = resolve_space(a, &cfg)?;
    if a.out.join("config.json").exists() {
        return Err(CliError::Environment(format!(
            "{} already holds a run; use `evoline resume` to continue it",
            a.out.display()
        )));
    }
    let mut log = open_run(&a.out, &cfg, &space)?;
    execute(&cfg, &space, &mut log, cfg.worker.parallel_workers, out)
}

pub fn cmd_resume(a: &ResumeArgs, out: &mut dyn std::io::Write) -> Result<RunResult, CliError> {
    let (mut log, cfg, space) = RunLog::resume(&a.run_dir)?;
    validate_config(&cfg)?;
    emit(
        out,
        format_args!(
            "resuming {} after generation {}",
            a.run_dir.display(),
            log.completed_generations()
        ),
    )?;
    let parallelism = a.parallel.unwrap_or(cfg.worker.parallel_workers).max(1);
    execute(&cfg, &space, &mut log, parallelism, out)
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    if !a.run_dir.is_dir() {
        return Err(CliError::Environment(format!("{} does not exist", a.run_dir.display())));
    }
    let dest = a.out.clone().unwrap_or_else(|| a.run_dir.join("report"));
    let files = runlog::report(&a.run_dir, &dest)?;
    emit(out, format_args!("wrote {} files to {}", files.len(), dest.display()))
}

pub fn cmd_compare(a: &CompareArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    if a.dirs.len() < 2 {
        return Err(usage(format!("compare needs at least 2 runs, got {}", a.dirs.len())));
    }
    for d in &a.dirs {
        if !d.is_dir() {
            return Err(CliError::Environment(format!("{} does not exist", d.display())));
        }
    }
    runlog::compare(&a.dirs, &a.out)?;
    let table = fs::read_to_string(a.out.join("compare.txt"))
        .map_err(|e| CliError::Environment(e.to_string()))?;
    out.write_all(table.as_bytes())
        .map_err(|e| CliError::Environment(format!("stdout: {e}")))
}

/// Returns the best objective value found (lower is better).
pub fn cmd_bench(a: &BenchArgs, out: &mut dyn std::io::Write) -> Result<f64, CliError> {
    if a.dims == 0 {
        return Err(usage("--dims must be at least 1"));
    }
    if !(a.bound.is_finite() && a.bound > 0.0) {
        return Err(usage("--bound must be positive and finite"));
    }
    let cfg = DEConfig {
        population_size: a.pop,
        max_generations: a.gens,
        scale_factor: a.scale_factor,
        crossover_rate: a.crossover_rate,
        mutation_scheme: a.scheme.into(),
        seed: a.seed,
    };
    let (name, objective): (&str, crate::engine::Objective) = match a.function {
        BenchFunction::Sphere => ("sphere", sphere),
        BenchFunction::Rastrigin => ("rastrigin", rastrigin),
    };
    let problem = BoxProblem::new(Domain::continuous(a.dims, -a.bound, a.bound), objective);
    let result = crate::de::evolve(&problem, &cfg, &RunOptions::default(), &mut crate::engine::NullSink)?;
    let value = -result.best.fitness.expect("best is evaluated");
    emit(out, format_args!("{name} d={} best {value:e}", a.dims))?;
    Ok(value)
}

/// Convenience for binaries: run with the process arguments against stdout.
pub fn main_with_env() -> i32 {
    let level = std::env::var("EVOLINE_LOG").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .target(env_logger::Target::Stderr)
        .init();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run(std::env::args_os(), &mut lock)
}
