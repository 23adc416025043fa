use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use delta_core::adapt::MethodSpec;
use delta_core::harness::{
    compare, emit_report, emit_summary, make_synthetic_task, prepare_task, run_episode, EpisodeOptions, PreparedTask,
    ReportFormat, RunLabel, Schedule, Shift, SweepConfig, TaskSpec, SYNTHETIC_TASK_LR,
};
use delta_core::netcore::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerConfig, TrainConfig};
use delta_core::normalize::InitStrategy;
use delta_core::streams::{make_scenario, write_manifest, ScenarioSpec, DEFAULT_PIECES};
use delta_core::{Error, Result};

#[derive(Parser)]
#[command(name = "delta", version, about = "Fully test-time adaptation on synthetic shifted streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task, train the source model and save a checkpoint.
    TrainSource(TrainSourceArgs),
    /// Replay one test stream through one method.
    Run(RunArgs),
    /// Run a methods x scenarios x seeds matrix.
    Sweep(SweepArgs),
    /// Write the ordered stream of a scenario as a CSV manifest.
    ExportStream(ExportArgs),
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 2000)]
    n_test: usize,
    /// `noise:s`, `scale:s` or `affine:s`.
    #[arg(long, default_value = "noise:2.0")]
    shift: Shift,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
}

impl TaskArgs {
    fn task(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            classes: self.classes,
            dim: self.dim,
            n_train: self.n_train,
            n_test: self.n_test,
            shift: self.shift,
            seed,
            ..TaskSpec::default()
        }
    }

    fn train(&self) -> TrainConfig {
        TrainConfig { epochs: self.epochs, ..TrainConfig::default() }
    }
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// `is+cb`, `ds+cb`, `is+ci` or `ds+ci`.
    #[arg(long, default_value = "is+cb")]
    scenario: String,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 0.1)]
    pi: f64,
    #[arg(long, default_value_t = DEFAULT_PIECES)]
    pieces: usize,
}

#[derive(Args, Clone)]
struct MethodArgs {
    #[arg(long, default_value_t = 0.95)]
    alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    lambda: f64,
    #[arg(long, default_value_t = SYNTHETIC_TASK_LR)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerKind::Adam)]
    optimizer: OptimizerKind,
    /// How test-time statistics are initialized: `first` or `inherit`.
    #[arg(long, default_value = "first")]
    tbr_init: InitStrategy,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// `standard` or `L=<samples>` for fast inference with slow updates.
    #[arg(long, default_value = "standard")]
    schedule: Schedule,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerKind {
    Adam,
    Sgd,
}

impl MethodArgs {
    fn method(&self, name: &str) -> Result<MethodSpec> {
        let optimizer = match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr),
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.lr),
        };
        let m = MethodSpec::preset(name)?
            .with_alpha(self.alpha)
            .with_lambda(self.lambda)
            .with_optimizer(optimizer)
            .with_init(self.tbr_init);
        m.validate()?;
        Ok(m)
    }

    fn episode(&self) -> EpisodeOptions {
        EpisodeOptions::new(self.batch_size).with_schedule(self.schedule)
    }
}

#[derive(Args)]
struct TrainSourceArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 2020)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "tent+delta")]
    method: String,
    /// Checkpoint from `train-source`; without it the task is built and trained here.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    params: MethodArgs,
    #[arg(long, default_value_t = 2020)]
    seed: u64,
    /// Report path (`.csv` for CSV, JSON lines otherwise); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record the per-step statistics error of the first normalization layer.
    #[arg(long)]
    trace_stats: bool,
    /// Record the norm of all normalization scales after every update.
    #[arg(long)]
    trace_gamma: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',', default_value = "tent,tent+delta")]
    methods: Vec<String>,
    /// Comma-separated scenario names.
    #[arg(long, value_delimiter = ',', default_value = "is+cb,ds+cb,is+ci,ds+ci")]
    scenarios: Vec<String>,
    /// `first..last` (inclusive) or a comma-separated list.
    #[arg(long, default_value = "2020..2029")]
    seeds: String,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    params: MethodArgs,
    /// Per-episode report path (`.csv` for CSV, JSON lines otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary CSV path; stdout when omitted.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 2020)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn scenario(args: &ScenarioArgs, name: &str, seed: u64) -> Result<ScenarioSpec> {
    ScenarioSpec::from_parts(name, args.rho, args.pi, args.pieces, seed)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Parse(format!("seeds `{s}` must be `first..last` or a comma-separated list"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn format_for(path: Option<&Path>) -> ReportFormat {
    path.map(ReportFormat::from_path).unwrap_or(ReportFormat::JsonLines)
}

fn train_source(args: &TrainSourceArgs) -> Result<()> {
    let task = args.task.task(args.seed);
    let prepared = prepare_task(&task, &args.task.hidden, &args.task.train())?;
    save_checkpoint(&args.out, &Checkpoint::new(prepared.model, Some(task)))?;
    eprintln!("saved {}", args.out.display());
    Ok(())
}

fn load_or_prepare(model: Option<&Path>, task: &TaskArgs, seed: u64) -> Result<PreparedTask> {
    let Some(path) = model else {
        return prepare_task(&task.task(seed), &task.hidden, &task.train());
    };
    let ckpt = load_checkpoint(path)?;
    let spec = ckpt.task.clone().unwrap_or_else(|| task.task(seed));
    if spec.dim != ckpt.model.input_dim() || spec.classes != ckpt.model.classes() {
        return Err(Error::Config(format!(
            "checkpoint model ({} inputs, {} classes) does not match the task ({} inputs, {} classes)",
            ckpt.model.input_dim(),
            ckpt.model.classes(),
            spec.dim,
            spec.classes
        )));
    }
    let (train, test) = make_synthetic_task(&spec)?;
    Ok(PreparedTask { task: spec, model: ckpt.model, train, test })
}

fn run(args: &RunArgs) -> Result<()> {
    let method = args.params.method(&args.method)?;
    let prepared = load_or_prepare(args.model.as_deref(), &args.task, args.seed)?;
    let spec = scenario(&args.scenario, &args.scenario.scenario, args.seed)?;
    let stream = make_scenario(&prepared.test, &spec)?;
    let mut options = args.params.episode();
    options.record_stats_error = args.trace_stats;
    options.record_gamma_norm = args.trace_gamma;
    let report = run_episode(&prepared.model, &stream, &method, &options, &RunLabel::from_scenario(&spec))?;
    emit_report(&[report], format_for(args.out.as_deref()), output(args.out.as_deref())?)
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let methods = args.methods.iter().map(|m| args.params.method(m)).collect::<Result<Vec<_>>>()?;
    let scenarios = args
        .scenarios
        .iter()
        .map(|s| scenario(&args.scenario, s, 0))
        .collect::<Result<Vec<_>>>()?;
    let config = SweepConfig {
        task: args.task.task(0),
        hidden: args.task.hidden.clone(),
        train: args.task.train(),
        methods,
        scenarios,
        seeds: parse_seeds(&args.seeds)?,
        episode: args.params.episode(),
    };
    let result = compare(&config)?;
    for cell in &result.cells {
        if let Err(e) = &cell.report {
            eprintln!(
                "{}",
                serde_json::json!({
                    "warning": "cell failed",
                    "method": config.methods[cell.method].name,
                    "scenario": config.scenarios[cell.scenario].kind().name(),
                    "seed": cell.seed,
                    "message": e,
                })
            );
        }
    }
    if let Some(path) = &args.out {
        emit_report(&result.reports(), ReportFormat::from_path(path), output(Some(path))?)?;
    }
    emit_summary(&result.summary, output(args.summary.as_deref())?)
}

fn export_stream(args: &ExportArgs) -> Result<()> {
    let (_, test) = make_synthetic_task(&args.task.task(args.seed))?;
    let spec = scenario(&args.scenario, &args.scenario.scenario, args.seed)?;
    let stream = make_scenario(&test, &spec)?;
    write_manifest(&stream, output(args.out.as_deref())?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainSource(a) => train_source(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::ExportStream(a) => export_stream(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
