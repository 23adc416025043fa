//! Single-pass online episodes.
//!
//! Labels never enter the adaptation loop: the runner only sees stream features, and
//! the evaluation step compares the logged predictions with the labels afterwards.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::metrics;
use crate::adapt::{Adapter, MethodSpec};
use crate::netcore::ModelState;
use crate::normalize::{batch_stats, InitStrategy, NormMode};
use crate::streams::{ScenarioSpec, TestStream};
use crate::{Error, FeatureMatrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Schedule {
    /// One adaptation step per arriving mini-batch.
    #[default]
    Standard,
    /// Predict every mini-batch with the current model; update once per `window`
    /// samples on the most recent `window` samples.
    FastSlow { window: usize },
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Standard => f.write_str("standard"),
            Schedule::FastSlow { window } => write!(f, "L={window}"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "standard" {
            return Ok(Schedule::Standard);
        }
        let window = s
            .strip_prefix("L=")
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| Error::Parse(format!("schedule `{s}` must be `standard` or `L=<samples>`")))?;
        Ok(Schedule::FastSlow { window })
    }
}

impl TryFrom<String> for Schedule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Schedule> for String {
    fn from(s: Schedule) -> String {
        s.to_string()
    }
}

/// The update plan of a fast/slow run: `(start, end)` sample ranges used as update
/// batches, each of exactly `window` samples.
pub fn fast_slow_schedule(stream_len: usize, batch_size: usize, window: usize) -> Result<Vec<(usize, usize)>> {
    if batch_size == 0 || window < batch_size || !window.is_multiple_of(batch_size) {
        return Err(Error::Config(format!(
            "update window L={window} must be a positive multiple of B={batch_size}"
        )));
    }
    Ok((1..=stream_len / window).map(|i| (i * window - window, i * window)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOptions {
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Record the first normalization layer's statistics error per prediction step.
    pub record_stats_error: bool,
    /// Record the norm of all `gamma` after every update (index 0 is the initial norm).
    pub record_gamma_norm: bool,
}

impl EpisodeOptions {
    pub fn new(batch_size: usize) -> Self {
        Self { batch_size, schedule: Schedule::Standard, record_stats_error: false, record_gamma_norm: false }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }
}

/// What the adaptation loop produced, before looking at labels.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRun {
    pub predictions: Vec<usize>,
    /// Reported class probabilities, one row per stream position.
    pub probabilities: FeatureMatrix,
    /// Size of every prediction batch, in arrival order.
    pub prediction_batches: Vec<usize>,
    pub update_batches: usize,
    pub updates: usize,
    pub stats_error: Option<Vec<f64>>,
    pub gamma_norm: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub method: String,
    pub scenario: String,
    pub rho: Option<f64>,
    pub pi: Option<f64>,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub tbr_init: InitStrategy,
    pub acc_mean_class: f64,
    pub acc_overall: f64,
    pub pred_counts: Vec<usize>,
    pub pred_std: f64,
    pub pred_range: usize,
    pub steps: usize,
    pub updates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_error: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_norm: Option<Vec<f64>>,
    pub duration_ms: f64,
}

impl EpisodeReport {
    /// Mean of the statistics-error trace, if recorded.
    pub fn mean_stats_error(&self) -> Option<f64> {
        self.stats_error
            .as_ref()
            .filter(|t| !t.is_empty())
            .map(|t| t.iter().sum::<f64>() / t.len() as f64)
    }
}

/// Identifies the run in its report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel {
    pub scenario: String,
    pub rho: Option<f64>,
    pub pi: Option<f64>,
    pub seed: u64,
}

impl RunLabel {
    pub fn from_scenario(spec: &ScenarioSpec) -> Self {
        Self { scenario: spec.kind().name().to_owned(), rho: spec.rho(), pi: spec.pi(), seed: spec.seed }
    }
}

pub fn run_episode(
    model0: &ModelState,
    stream: &TestStream,
    method: &MethodSpec,
    options: &EpisodeOptions,
    label: &RunLabel,
) -> Result<EpisodeReport> {
    let started = Instant::now();
    let run = run_online(model0, &stream.features, method, options)?;
    let m = metrics(&run.predictions, &stream.labels, stream.classes)?;
    Ok(EpisodeReport {
        method: method.name.clone(),
        scenario: label.scenario.clone(),
        rho: label.rho,
        pi: label.pi,
        batch_size: options.batch_size,
        alpha: method.alpha,
        lambda: method.lambda,
        lr: method.optimizer.lr(),
        seed: label.seed,
        schedule: options.schedule,
        tbr_init: method.init,
        acc_mean_class: m.mean_class_acc,
        acc_overall: m.overall_acc,
        pred_counts: m.counts,
        pred_std: m.std,
        pred_range: m.range,
        steps: run.prediction_batches.len(),
        updates: run.updates,
        stats_error: run.stats_error,
        gamma_norm: run.gamma_norm,
        duration_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Replays `features` in order through a fresh copy of `model0`.
pub fn run_online(
    model0: &ModelState,
    features: &FeatureMatrix,
    method: &MethodSpec,
    options: &EpisodeOptions,
) -> Result<OnlineRun> {
    let n = features.rows();
    let b = options.batch_size;
    if n == 0 {
        return Err(Error::Input("empty test stream".to_owned()));
    }
    if b == 0 {
        return Err(Error::Config("batch size must be >= 1".to_owned()));
    }
    if features.cols() != model0.input_dim() {
        return Err(Error::Config(format!(
            "stream has {} features, model expects {}",
            features.cols(),
            model0.input_dim()
        )));
    }
    let plan = match options.schedule {
        Schedule::Standard => None,
        Schedule::FastSlow { window } => {
            fast_slow_schedule(n, b, window)?;
            Some(window)
        }
    };

    let mut adapter = Adapter::new(model0, method.clone())?;
    let population = options
        .record_stats_error
        .then(|| population_stats(&adapter.model, features))
        .flatten();
    let mut stats_error = population.as_ref().map(|_| Vec::new());
    let mut gamma_norm = options.record_gamma_norm.then(|| vec![adapter.model.gamma_norm()]);
    let mut predictions = Vec::with_capacity(n);
    let mut probabilities = FeatureMatrix::zeros(n, model0.classes());
    let mut prediction_batches = Vec::new();
    let mut update_batches = 0;

    let mut start = 0;
    while start < n {
        let end = (start + b).min(n);
        let step = prediction_batches.len();
        let batch = rows(features, start, end);
        if let (Some(pop), Some(trace)) = (&population, stats_error.as_mut()) {
            if let Some(used) = used_statistics(&adapter.model, &batch, method.norm, method.init) {
                trace.push(stats_distance(&used, pop));
            }
        }
        let probs = match &plan {
            None => {
                let before = adapter.state.updates;
                let out = adapter.step(&batch).map_err(|e| at_step(e, step))?;
                update_batches += 1;
                if let (Some(g), true) = (gamma_norm.as_mut(), adapter.state.updates > before) {
                    g.push(adapter.model.gamma_norm());
                }
                out.predictions
            }
            Some(window) => {
                let probs = adapter.predict(&batch).map_err(|e| at_step(e, step))?;
                // B divides L, so only full batches can end on a window boundary
                if end.is_multiple_of(*window) {
                    let before = adapter.state.updates;
                    adapter
                        .step(&rows(features, end - window, end))
                        .map_err(|e| at_step(e, step))?;
                    update_batches += 1;
                    if let (Some(g), true) = (gamma_norm.as_mut(), adapter.state.updates > before) {
                        g.push(adapter.model.gamma_norm());
                    }
                }
                probs
            }
        };
        predictions.extend(probs.argmax_rows());
        for r in 0..probs.rows() {
            probabilities.row_mut(start + r).copy_from_slice(probs.row(r));
        }
        prediction_batches.push(end - start);
        start = end;
    }

    Ok(OnlineRun {
        predictions,
        probabilities,
        prediction_batches,
        update_batches,
        updates: adapter.state.updates as usize,
        stats_error,
        gamma_norm,
    })
}

fn rows(x: &FeatureMatrix, start: usize, end: usize) -> FeatureMatrix {
    let idx: Vec<usize> = (start..end).collect();
    x.select_rows(&idx)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric { layer, detail } => Error::Numeric { layer, detail: format!("step {step}: {detail}") },
        other => other,
    }
}

type Stats = (Vec<f64>, Vec<f64>);

/// Population mean/std of the first normalization layer's input over the whole stream.
fn population_stats(model: &ModelState, features: &FeatureMatrix) -> Option<Stats> {
    let block = model.hidden.first()?;
    let pre = features.affine(&block.dense.weights, &block.dense.bias, block.dense.output);
    Some(batch_stats(&pre, block.norm.eps))
}

/// Statistics the first normalization layer is about to normalize `batch` with.
fn used_statistics(model: &ModelState, batch: &FeatureMatrix, mode: NormMode, init: InitStrategy) -> Option<Stats> {
    let block = model.hidden.first()?;
    let norm = &block.norm;
    let pre = || batch.affine(&block.dense.weights, &block.dense.bias, block.dense.output);
    Some(match mode {
        NormMode::SourceEma => (norm.source_mean.clone(), norm.source_std.clone()),
        NormMode::BatchStat => batch_stats(&pre(), norm.eps),
        NormMode::TestEma | NormMode::Tbr => match (norm.initialized, init) {
            (true, _) => (norm.test_mean.clone(), norm.test_std.clone()),
            (false, InitStrategy::First) => batch_stats(&pre(), norm.eps),
            (false, InitStrategy::Inherit) => (norm.source_mean.clone(), norm.source_std.clone()),
        },
    })
}

/// `sqrt(|mu_used - mu_pop|^2 + |sigma_used - sigma_pop|^2)`.
fn stats_distance(used: &Stats, pop: &Stats) -> f64 {
    let dm: f64 = used.0.iter().zip(&pop.0).map(|(a, b)| (a - b).powi(2)).sum();
    let ds: f64 = used.1.iter().zip(&pop.1).map(|(a, b)| (a - b).powi(2)).sum();
    (dm + ds).sqrt()
}
