//! Command-line front end: `fit`, `select`, `eval` and `synth`.
//!
//! Every command reads its parameters from flags, optionally layered over a
//! JSON config file whose unknown keys are rejected. Exit status is 0 on
//! success, 1 for invalid input and 2 when a computation fails numerically.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use semisel::dataset::{self, MultiTaskDataset, SynthConfig};
use semisel::select_eval::{self, ExperimentConfig, Method, ParamGrid};
use semisel::solver::{self, Hyperparams, RowWeighting, SelectionModel};
use semisel::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "semisel", version, about = "Semi-supervised multi-task feature selection")]
pub struct Cli {
    /// Seed for every random choice (splits, label masks, synthetic data)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to one per core
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (-v info, -vv debug, -vvv trace)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit selection matrices on a dataset manifest and write the model
    Fit(FitArgs),
    /// Pick the top-ranked features of a fitted model
    Select(SelectArgs),
    /// Run the label-fraction / feature-count evaluation protocol
    Eval(EvalArgs),
    /// Write a planted-support synthetic dataset
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Weighting {
    /// Coefficient 1/β on the row reweighting matrix
    Exact,
    /// Coefficient α/β on the row reweighting matrix
    AlphaOverBeta,
}

/// Solver settings shared by `fit` and `eval`.
#[derive(Debug, Args)]
pub struct SolverFlags {
    /// Ridge of the local clique regressions
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Clique size (the sample plus k-1 neighbours)
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight standing in for the infinite label weight
    #[arg(long)]
    pub inf_surrogate: Option<f64>,
    /// Smoothing of the row and trace norms
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Stop once the relative objective change falls below this
    #[arg(long)]
    pub rel_tol: Option<f64>,
    #[arg(long, value_enum)]
    pub row_weighting: Option<Weighting>,
    /// Use only the first N tasks of the manifest
    #[arg(long)]
    pub tasks: Option<usize>,
}

impl SolverFlags {
    fn apply(&self, hp: &mut Hyperparams) {
        if let Some(v) = self.lambda {
            hp.lambda = v;
        }
        if let Some(v) = self.k {
            hp.k = v;
        }
        if let Some(v) = self.inf_surrogate {
            hp.inf_surrogate = v;
        }
        if let Some(v) = self.delta {
            hp.delta = v;
        }
        if let Some(v) = self.max_iter {
            hp.max_iter = v;
        }
        if let Some(v) = self.rel_tol {
            hp.rel_tol = v;
        }
        if let Some(w) = self.row_weighting {
            hp.row_weighting = match w {
                Weighting::Exact => RowWeighting::Exact,
                Weighting::AlphaOverBeta => RowWeighting::AlphaOverBeta,
            };
        }
    }
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct FitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model JSON output
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with solver hyperparameters; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Number of features to keep per task
    #[arg(long)]
    pub top: usize,
    /// Selection JSON output
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report JSON output
    #[arg(long)]
    pub out: PathBuf,
    /// JSON experiment config; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Methods to compare: sfmc, fisher, all
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// Search α, β, γ over 1e-6, 1e-4, ..., 1e6
    #[arg(long, conflicts_with_all = ["alphas", "betas", "gammas"])]
    pub full_grid: bool,
    /// Label fractions, e.g. 0.05,0.25,1
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Numbers of selected features
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Ridge of the evaluation classifier
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Also write per-repeat results as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Record wall-clock time per cell (makes reports non-reproducible)
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SynthArgs {
    /// Output directory for the manifest and CSV files
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator config; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Size of the planted support
    #[arg(long)]
    pub support: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

/// A failed command: message plus exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INVALID };
        Failure { code, message: e.to_string() }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_INVALID, message: message.into() }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut out = serde_json::to_string_pretty(value).expect("plain data serializes");
    out.push('\n');
    out
}

fn load_tasks(manifest: &Path, tasks: Option<usize>) -> Result<MultiTaskDataset, Failure> {
    let ds = dataset::load_manifest(manifest)?;
    match tasks {
        Some(n) => Ok(ds.first_tasks(n)?),
        None => Ok(ds),
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), Failure> {
    let mut hp: Hyperparams = match &args.config {
        Some(path) => read_config(path)?,
        None => Hyperparams::default(),
    };
    if let Some(v) = args.alpha {
        hp.alpha = v;
    }
    if let Some(v) = args.beta {
        hp.beta = v;
    }
    if let Some(v) = args.gamma {
        hp.gamma = v;
    }
    args.solver.apply(&mut hp);
    hp.validate()?;
    let ds = load_tasks(&args.manifest, args.solver.tasks)?;
    let model = solver::fit(&ds, &hp)?;
    write_text(&args.out, &model.to_json())?;

    let trace = &model.objective_trace;
    println!(
        "fit {} task(s), d = {}: {} iteration(s), {}",
        ds.n_tasks(),
        ds.dim(),
        model.iterations,
        if model.converged { "converged" } else { "stopped at max_iter" }
    );
    println!("objective {:.6e} -> {:.6e}", trace[0], trace[trace.len() - 1]);
    for (r, v) in trace.iter().enumerate().skip(1).take(5) {
        println!("  iter {r:>3}  {v:.9e}");
    }
    if trace.len() > 6 {
        println!("  ...");
        println!("  iter {:>3}  {:.9e}", trace.len() - 1, trace[trace.len() - 1]);
    }
    println!("model written to {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TaskSelection<'a> {
    name: &'a str,
    selected: Vec<usize>,
    scores: Vec<f64>,
}

#[derive(Serialize)]
struct SelectionFile<'a> {
    top: usize,
    tasks: Vec<TaskSelection<'a>>,
}

pub fn cmd_select(args: &SelectArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.model).map_err(|e| invalid(format!("{}: {e}", args.model.display())))?;
    let model = SelectionModel::from_json(&text)?;
    let d = model.dim();
    if args.top == 0 || args.top > d {
        return Err(invalid(format!("--top {} out of range 1..={d}", args.top)));
    }
    let mut tasks = Vec::with_capacity(model.tasks.len());
    for (l, task) in model.tasks.iter().enumerate() {
        let ranking = select_eval::rank_features(&model, l)?;
        let selected = select_eval::select_top(&ranking, args.top)?;
        let scores = selected.iter().map(|&j| ranking.scores[j]).collect();
        println!("{}: {:?}", task.name, selected);
        tasks.push(TaskSelection { name: &task.name, selected, scores });
    }
    write_text(&args.out, &to_pretty_json(&SelectionFile { top: args.top, tasks }))
}

pub fn cmd_eval(args: &EvalArgs, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg: ExperimentConfig = match &args.config {
        Some(path) => read_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(names) = &args.methods {
        cfg.methods = names
            .iter()
            .map(|n| n.parse::<Method>().map_err(|e| invalid(e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    if args.full_grid {
        cfg.grid = ParamGrid::full();
    }
    if let Some(v) = &args.alphas {
        cfg.grid.alphas = v.clone();
    }
    if let Some(v) = &args.betas {
        cfg.grid.betas = v.clone();
    }
    if let Some(v) = &args.gammas {
        cfg.grid.gammas = v.clone();
    }
    if let Some(v) = &args.fractions {
        cfg.fractions = v.clone();
    }
    if let Some(v) = &args.counts {
        cfg.feature_counts = v.clone();
    }
    if let Some(v) = args.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = args.test_fraction {
        cfg.test_fraction = v;
    }
    if let Some(v) = args.ridge {
        cfg.ridge = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.record_timing |= args.timing;
    args.solver.apply(&mut cfg.base);
    cfg.base.validate()?;

    let ds = load_tasks(&args.manifest, args.solver.tasks)?;
    let report = select_eval::run_experiment(&ds, &cfg)?;
    write_text(&args.out, &report.to_json())?;
    if let Some(path) = &args.csv {
        write_text(path, &report.to_csv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => read_config(path)?,
        None => SynthConfig::default(),
    };
    let overrides = [
        (args.d, &mut cfg.d),
        (args.support, &mut cfg.support_size),
        (args.tasks, &mut cfg.tasks),
        (args.samples, &mut cfg.samples_per_task),
        (args.classes, &mut cfg.classes),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(v) = args.signal {
        cfg.signal_strength = v;
    }
    if let Some(v) = args.noise {
        cfg.noise_sigma = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = dataset::generate_synthetic(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| invalid(format!("{}: {e}", args.out.display())))?;
    let manifest = dataset::write_manifest(&ds, &args.out)?;
    write_text(&args.out.join("synth_config.json"), &to_pretty_json(&cfg))?;
    println!(
        "wrote {} task(s), d = {}, support {:?} to {}",
        ds.n_tasks(),
        ds.dim(),
        ds.support().unwrap_or_default(),
        manifest.display()
    );
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    // a second init (tests calling `run` repeatedly) is harmless
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_INVALID;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Eval(a) => cmd_eval(a, cli.seed),
        Command::Synth(a) => cmd_synth(a, cli.seed),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
