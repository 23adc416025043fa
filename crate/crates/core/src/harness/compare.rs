//! Methods x scenarios x seeds matrices.
//!
//! Every cell owns its own model copy, so cells run concurrently on a rayon pool whose
//! size is capped by `DELTA_THREADS`. Aggregation sorts by cell index afterwards and
//! does not depend on completion order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::{run_episode, EpisodeOptions, EpisodeReport, RunLabel};
use super::task::{prepare_task, PreparedTask, TaskSpec, DEFAULT_HIDDEN};
use crate::adapt::MethodSpec;
use crate::netcore::TrainConfig;
use crate::streams::{make_scenario, ScenarioSpec};
use crate::{Error, Result};

pub const THREADS_ENV: &str = "DELTA_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Task recipe; its seed is replaced by each sweep seed.
    pub task: TaskSpec,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub methods: Vec<MethodSpec>,
    /// Scenario templates; their seeds are replaced by each sweep seed.
    pub scenarios: Vec<ScenarioSpec>,
    pub seeds: Vec<u64>,
    pub episode: EpisodeOptions,
}

impl SweepConfig {
    pub fn new(methods: Vec<MethodSpec>, scenarios: Vec<ScenarioSpec>, seeds: Vec<u64>, batch_size: usize) -> Self {
        Self {
            task: TaskSpec::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            train: TrainConfig::default(),
            methods,
            scenarios,
            seeds,
            episode: EpisodeOptions::new(batch_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub method: usize,
    pub scenario: usize,
    pub seed: u64,
    /// The report, or the error message of a failed cell.
    pub report: std::result::Result<EpisodeReport, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub scenario: String,
    pub rho: Option<f64>,
    pub pi: Option<f64>,
    pub episodes: usize,
    pub failures: usize,
    pub seeds: Vec<u64>,
    pub acc_mean: f64,
    /// Population standard deviation over seeds.
    pub acc_std: f64,
    pub acc_median: f64,
    pub overall_mean: f64,
    pub pred_std_mean: f64,
    pub pred_std_median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// In (method, scenario, seed) order.
    pub cells: Vec<CellOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl SweepResult {
    pub fn reports(&self) -> Vec<EpisodeReport> {
        self.cells.iter().filter_map(|c| c.report.as_ref().ok().cloned()).collect()
    }

    pub fn row(&self, method: &str, scenario: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.scenario == scenario)
    }
}

/// Thread cap from `DELTA_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs `f` on a rayon pool capped by `DELTA_THREADS`.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn compare(config: &SweepConfig) -> Result<SweepResult> {
    if config.methods.is_empty() || config.scenarios.is_empty() || config.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one method, scenario and seed".to_owned()));
    }
    for m in &config.methods {
        m.validate()?;
    }
    for s in &config.scenarios {
        s.validate()?;
    }
    with_thread_cap(|| run_matrix(config))
}

fn run_matrix(config: &SweepConfig) -> SweepResult {
    let prepared: Vec<std::result::Result<PreparedTask, String>> = config
        .seeds
        .par_iter()
        .map(|&seed| prepare_task(&config.task.with_seed(seed), &config.hidden, &config.train).map_err(|e| e.to_string()))
        .collect();

    let mut jobs = Vec::new();
    for mi in 0..config.methods.len() {
        for si in 0..config.scenarios.len() {
            for ti in 0..config.seeds.len() {
                jobs.push((mi, si, ti));
            }
        }
    }
    let cells: Vec<CellOutcome> = jobs
        .par_iter()
        .map(|&(mi, si, ti)| {
            let seed = config.seeds[ti];
            let report = match &prepared[ti] {
                Ok(task) => run_cell(task, &config.methods[mi], &config.scenarios[si], seed, &config.episode)
                    .map_err(|e| e.to_string()),
                Err(e) => Err(format!("task preparation failed: {e}")),
            };
            CellOutcome { method: mi, scenario: si, seed, report }
        })
        .collect();

    let mut summary = Vec::new();
    for (mi, method) in config.methods.iter().enumerate() {
        for (si, scenario) in config.scenarios.iter().enumerate() {
            let group: Vec<&CellOutcome> = cells.iter().filter(|c| c.method == mi && c.scenario == si).collect();
            summary.push(summarize(method, scenario, &group));
        }
    }
    SweepResult { cells, summary }
}

fn run_cell(
    task: &PreparedTask,
    method: &MethodSpec,
    scenario: &ScenarioSpec,
    seed: u64,
    options: &EpisodeOptions,
) -> Result<EpisodeReport> {
    let spec = ScenarioSpec { seed, ..*scenario };
    let stream = make_scenario(&task.test, &spec)?;
    run_episode(&task.model, &stream, method, options, &RunLabel::from_scenario(&spec))
}

fn summarize(method: &MethodSpec, scenario: &ScenarioSpec, cells: &[&CellOutcome]) -> SummaryRow {
    let ok: Vec<&EpisodeReport> = cells.iter().filter_map(|c| c.report.as_ref().ok()).collect();
    let acc: Vec<f64> = ok.iter().map(|r| r.acc_mean_class).collect();
    let overall: Vec<f64> = ok.iter().map(|r| r.acc_overall).collect();
    let pred_std: Vec<f64> = ok.iter().map(|r| r.pred_std).collect();
    SummaryRow {
        method: method.name.clone(),
        scenario: scenario.kind().name().to_owned(),
        rho: scenario.rho(),
        pi: scenario.pi(),
        episodes: ok.len(),
        failures: cells.len() - ok.len(),
        seeds: cells.iter().map(|c| c.seed).collect(),
        acc_mean: mean(&acc),
        acc_std: population_std(&acc),
        acc_median: median(&acc),
        overall_mean: mean(&overall),
        pred_std_mean: mean(&pred_std),
        pred_std_median: median(&pred_std),
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}
