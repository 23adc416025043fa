//! Per-channel normalization regimes used during test-time adaptation.
//!
//! | mode        | statistics used to normalize                 | state change          |
//! |-------------|----------------------------------------------|-----------------------|
//! | `SourceEma` | frozen training-time moving averages         | none                  |
//! | `BatchStat` | statistics of the current mini-batch         | none                  |
//! | `TestEma`   | test-time moving averages                    | EMA update after use  |
//! | `Tbr`       | batch statistics rectified by `r`, `d`       | EMA update after use  |
//!
//! Batch renormalization at test time computes
//!
//! ```text
//! v* = (v - mu_batch) / sigma_batch * r + d
//! r  = sg(sigma_batch) / sigma_ema
//! d  = (sg(mu_batch) - mu_ema) / sigma_ema
//! ```
//!
//! followed by `gamma * v* + beta`. Forward values coincide with normalizing by the EMA
//! statistics directly, but `r` and `d` are constants in the backward pass, so gradients
//! flow through the batch statistics as in ordinary batch normalization.

use serde::{Deserialize, Serialize};

use crate::{Error, FeatureMatrix, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_ALPHA: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormMode {
    /// Frozen source statistics.
    SourceEma,
    /// Statistics of the current test mini-batch (BN adapt).
    BatchStat,
    /// Test-time moving averages used directly.
    TestEma,
    /// Test-time batch renormalization.
    Tbr,
}

impl NormMode {
    pub fn uses_test_ema(self) -> bool {
        matches!(self, NormMode::TestEma | NormMode::Tbr)
    }

    pub fn supports_gradients(self) -> bool {
        matches!(self, NormMode::BatchStat | NormMode::Tbr)
    }

    pub fn name(self) -> &'static str {
        match self {
            NormMode::SourceEma => "source-ema",
            NormMode::BatchStat => "batch-stat",
            NormMode::TestEma => "test-ema",
            NormMode::Tbr => "tbr",
        }
    }
}

/// How the test-time moving averages are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// From the statistics of the first test mini-batch.
    #[default]
    First,
    /// Copied from the source statistics.
    Inherit,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(InitStrategy::First),
            "inherit" => Ok(InitStrategy::Inherit),
            other => Err(Error::Parse(format!(
                "unknown init strategy `{other}` (expected first|inherit)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayerState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub source_mean: Vec<f64>,
    pub source_std: Vec<f64>,
    pub test_mean: Vec<f64>,
    pub test_std: Vec<f64>,
    /// EMA smoothing coefficient for the test-time statistics.
    pub alpha: f64,
    pub eps: f64,
    pub initialized: bool,
}

impl NormLayerState {
    /// Identity affine map, zero mean / unit std source statistics.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            source_mean: vec![0.0; channels],
            source_std: vec![1.0; channels],
            test_mean: vec![0.0; channels],
            test_std: vec![1.0; channels],
            alpha: DEFAULT_ALPHA,
            eps: DEFAULT_EPS,
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Drops the test-time statistics so the next episode starts fresh.
    pub fn reset_test_stats(&mut self) {
        let c = self.channels();
        self.test_mean = vec![0.0; c];
        self.test_std = vec![1.0; c];
        self.initialized = false;
    }
}

/// Everything the backward pass needs from one normalization forward.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    pub mode: NormMode,
    pub input: FeatureMatrix,
    pub batch_mean: Vec<f64>,
    pub batch_std: Vec<f64>,
    /// `(v - mu_batch) / sigma_batch`.
    pub standardized: FeatureMatrix,
    /// `v*`, the normalized value before scale and shift.
    pub normalized: FeatureMatrix,
    pub r: Option<Vec<f64>>,
    pub d: Option<Vec<f64>>,
    /// Statistics actually used to normalize (effective mean / std).
    pub used_mean: Vec<f64>,
    pub used_std: Vec<f64>,
}

/// Per-channel mean and `sqrt(biased variance + eps)`.
pub fn batch_stats(v: &FeatureMatrix, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (b, c) = (v.rows(), v.cols());
    let n = b as f64;
    let mut mean = vec![0.0; c];
    for r in 0..b {
        for (m, x) in mean.iter_mut().zip(v.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for r in 0..b {
        for ((s, x), m) in var.iter_mut().zip(v.row(r)).zip(&mean) {
            let dx = x - m;
            *s += dx * dx;
        }
    }
    let std = var.into_iter().map(|s| (s / n + eps).sqrt()).collect();
    (mean, std)
}

/// `mu_ema <- alpha * mu_ema + (1 - alpha) * mu_batch`, same for sigma.
pub fn ema_update(state: &NormLayerState, batch_mean: &[f64], batch_std: &[f64]) -> NormLayerState {
    let mut next = state.clone();
    ema_update_in_place(&mut next, batch_mean, batch_std);
    next
}

pub(crate) fn ema_update_in_place(state: &mut NormLayerState, batch_mean: &[f64], batch_std: &[f64]) {
    let a = state.alpha;
    for (m, bm) in state.test_mean.iter_mut().zip(batch_mean) {
        *m = a * *m + (1.0 - a) * bm;
    }
    for (s, bs) in state.test_std.iter_mut().zip(batch_std) {
        *s = a * *s + (1.0 - a) * bs;
    }
}

/// Inputs available to [`init_stats`].
#[derive(Debug, Clone, Copy, Default)]
pub struct InitContext<'a> {
    /// Batch statistics `(mean, std)` of the first test mini-batch at this layer.
    pub first_batch: Option<(&'a [f64], &'a [f64])>,
}

pub fn init_stats(
    state: &NormLayerState,
    strategy: InitStrategy,
    context: InitContext<'_>,
) -> Result<NormLayerState> {
    let mut next = state.clone();
    init_stats_in_place(&mut next, strategy, context)?;
    Ok(next)
}

pub(crate) fn init_stats_in_place(
    state: &mut NormLayerState,
    strategy: InitStrategy,
    context: InitContext<'_>,
) -> Result<()> {
    if state.initialized {
        return Err(Error::State(
            "test-time statistics already initialized".to_owned(),
        ));
    }
    match strategy {
        InitStrategy::First => {
            let (mean, std) = context.first_batch.ok_or_else(|| {
                Error::State("`first` initialization needs the first batch statistics".to_owned())
            })?;
            if mean.len() != state.channels() || std.len() != state.channels() {
                return Err(Error::Config("first-batch statistics have wrong width".to_owned()));
            }
            state.test_mean = mean.to_vec();
            state.test_std = std.to_vec();
        }
        InitStrategy::Inherit => {
            if state.source_std.iter().any(|&s| s.is_nan() || s <= 0.0) {
                return Err(Error::State("source statistics missing or non-positive".to_owned()));
            }
            state.test_mean = state.source_mean.clone();
            state.test_std = state.source_std.clone();
        }
    }
    state.initialized = true;
    Ok(())
}

/// Knobs for the crate-internal forward variants.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NormForwardOptions<'a> {
    /// Apply the EMA update after normalizing (TestEma / Tbr only).
    pub update_ema: bool,
    /// Use these `(r, d)` instead of computing them (gradient oracle only).
    pub frozen_factors: Option<(&'a [f64], &'a [f64])>,
}

impl Default for NormForwardOptions<'_> {
    fn default() -> Self {
        Self {
            update_ema: true,
            frozen_factors: None,
        }
    }
}

/// Normalizes `v` under `mode`, returning the scaled-and-shifted output, the cache for
/// the backward pass and the state after any EMA update.
pub fn normalize_forward(
    v: &FeatureMatrix,
    state: &NormLayerState,
    mode: NormMode,
) -> Result<(FeatureMatrix, NormCache, NormLayerState)> {
    let mut next = state.clone();
    let (out, cache) = normalize_forward_in_place(v, &mut next, mode, NormForwardOptions::default())?;
    Ok((out, cache, next))
}

pub(crate) fn normalize_forward_in_place(
    v: &FeatureMatrix,
    state: &mut NormLayerState,
    mode: NormMode,
    opts: NormForwardOptions<'_>,
) -> Result<(FeatureMatrix, NormCache)> {
    let c = state.channels();
    if v.cols() != c {
        return Err(Error::Config(format!(
            "normalization expects {c} channels, got {}",
            v.cols()
        )));
    }
    if mode.uses_test_ema() && !state.initialized {
        return Err(Error::State(format!(
            "{} normalization requires initialized test-time statistics",
            mode.name()
        )));
    }
    let (batch_mean, batch_std) = batch_stats(v, state.eps);
    let b = v.rows();

    let (used_mean, used_std) = match mode {
        NormMode::SourceEma => (state.source_mean.clone(), state.source_std.clone()),
        NormMode::BatchStat | NormMode::Tbr => (batch_mean.clone(), batch_std.clone()),
        NormMode::TestEma => (state.test_mean.clone(), state.test_std.clone()),
    };

    let mut standardized = FeatureMatrix::zeros(b, c);
    for r in 0..b {
        let row = standardized.row_mut(r);
        for (j, (x, o)) in v.row(r).iter().zip(row.iter_mut()).enumerate() {
            *o = (x - used_mean[j]) / used_std[j];
        }
    }

    let (normalized, r_fac, d_fac, eff_mean, eff_std) = if mode == NormMode::Tbr {
        let (r_fac, d_fac): (Vec<f64>, Vec<f64>) = match opts.frozen_factors {
            Some((r, d)) => (r.to_vec(), d.to_vec()),
            None => (
                batch_std.iter().zip(&state.test_std).map(|(sb, se)| sb / se).collect(),
                batch_mean
                    .iter()
                    .zip(&state.test_mean)
                    .zip(&state.test_std)
                    .map(|((mb, me), se)| (mb - me) / se)
                    .collect(),
            ),
        };
        let mut n = FeatureMatrix::zeros(b, c);
        for r in 0..b {
            let row = n.row_mut(r);
            for (j, (s, o)) in standardized.row(r).iter().zip(row.iter_mut()).enumerate() {
                *o = s * r_fac[j] + d_fac[j];
            }
        }
        (
            n,
            Some(r_fac),
            Some(d_fac),
            state.test_mean.clone(),
            state.test_std.clone(),
        )
    } else {
        (standardized.clone(), None, None, used_mean, used_std)
    };

    let mut out = FeatureMatrix::zeros(b, c);
    for r in 0..b {
        let row = out.row_mut(r);
        for (j, (n, o)) in normalized.row(r).iter().zip(row.iter_mut()).enumerate() {
            *o = state.gamma[j] * n + state.beta[j];
        }
    }

    if mode.uses_test_ema() && opts.update_ema {
        ema_update_in_place(state, &batch_mean, &batch_std);
    }

    let cache = NormCache {
        mode,
        input: v.clone(),
        batch_mean,
        batch_std,
        standardized,
        normalized,
        r: r_fac,
        d: d_fac,
        used_mean: eff_mean,
        used_std: eff_std,
    };
    Ok((out, cache))
}

/// Gradients of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub input: FeatureMatrix,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Backward pass for `BatchStat` and `Tbr` caches.
///
/// The input gradient uses the full batch-normalization Jacobian (batch mean and std
/// depend on every row). Under `Tbr` it is additionally scaled by the constant `r`.
pub fn normalize_backward(
    grad_out: &FeatureMatrix,
    cache: &NormCache,
    state: &NormLayerState,
) -> Result<NormGrads> {
    normalize_backward_impl(grad_out, cache, state, false)
}

pub(crate) fn normalize_backward_impl(
    grad_out: &FeatureMatrix,
    cache: &NormCache,
    state: &NormLayerState,
    allow_test_ema: bool,
) -> Result<NormGrads> {
    match cache.mode {
        NormMode::BatchStat | NormMode::Tbr => {}
        NormMode::TestEma if allow_test_ema => {}
        other => {
            return Err(Error::Contract(format!(
                "backward through {} normalization is not supported",
                other.name()
            )))
        }
    }
    let (b, c) = (grad_out.rows(), grad_out.cols());
    if b != cache.input.rows() || c != cache.input.cols() {
        return Err(Error::Config("gradient shape does not match cache".to_owned()));
    }

    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for r in 0..b {
        for (j, g) in grad_out.row(r).iter().enumerate() {
            grad_gamma[j] += g * cache.normalized.get(r, j);
            grad_beta[j] += g;
        }
    }

    let mut grad_in = FeatureMatrix::zeros(b, c);
    if cache.mode == NormMode::TestEma {
        // Statistics are constants here: plain per-channel scaling.
        for r in 0..b {
            for j in 0..c {
                grad_in.set(r, j, grad_out.get(r, j) * state.gamma[j] / cache.used_std[j]);
            }
        }
    } else {
        let n = b as f64;
        // Gradient w.r.t. the standardized value, then the batch-norm Jacobian.
        let mut mean_g = vec![0.0; c];
        let mut mean_gx = vec![0.0; c];
        for r in 0..b {
            for j in 0..c {
                let g = grad_out.get(r, j) * state.gamma[j];
                mean_g[j] += g;
                mean_gx[j] += g * cache.standardized.get(r, j);
            }
        }
        for j in 0..c {
            mean_g[j] /= n;
            mean_gx[j] /= n;
        }
        for r in 0..b {
            for j in 0..c {
                let g = grad_out.get(r, j) * state.gamma[j];
                let x = cache.standardized.get(r, j);
                grad_in.set(r, j, (g - mean_g[j] - x * mean_gx[j]) / cache.batch_std[j]);
            }
        }
        if let Some(r_fac) = &cache.r {
            for r in 0..b {
                for (gi, rf) in grad_in.row_mut(r).iter_mut().zip(r_fac) {
                    *gi *= rf;
                }
            }
        }
    }

    Ok(NormGrads {
        input: grad_in,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}
