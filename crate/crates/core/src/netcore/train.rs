//! Source training: cross-entropy over every parameter with training-mode batch
//! normalization, accumulating the source statistics as moving averages.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{backprop, ForwardConfig, ModelSpec, ModelState, OptimizerConfig, OptimizerState};
use crate::normalize::NormMode;
use crate::rng::{self, purpose};
use crate::streams::LabeledDataset;
use crate::{Error, FeatureMatrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the newest batch in the source-statistics moving average.
    pub bn_momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-2, bn_momentum: 0.1, batch_size: 64, seed: 0 }
    }
}

pub fn train_source(spec: &ModelSpec, train: &LabeledDataset, config: &TrainConfig) -> Result<ModelState> {
    if train.is_empty() {
        return Err(Error::Input("training set is empty".to_owned()));
    }
    if train.dim() != spec.input_dim || train.classes != spec.classes {
        return Err(Error::Config(format!(
            "dataset is {}-dim with {} classes, model expects {}-dim with {}",
            train.dim(),
            train.classes,
            spec.input_dim,
            spec.classes
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".to_owned()));
    }
    if !(config.bn_momentum > 0.0 && config.bn_momentum <= 1.0) {
        return Err(Error::Config(format!("bn momentum must lie in (0, 1], got {}", config.bn_momentum)));
    }
    let mut model = ModelState::init(spec)?;
    let opt = OptimizerConfig::adam(config.lr);
    let mut opt_state = OptimizerState::default();
    let mut rng = rng::seeded(config.seed, purpose::TRAIN_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let fwd = ForwardConfig::new(NormMode::BatchStat);
    let m = config.bn_momentum;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 && train.len() > 1 {
                continue;
            }
            let x = train.features.select_rows(chunk);
            let trace = model.forward_mut(&x, &fwd)?;
            let b = chunk.len() as f64;
            let mut grad = FeatureMatrix::zeros(chunk.len(), spec.classes);
            for (r, &i) in chunk.iter().enumerate() {
                let row = grad.row_mut(r);
                row.copy_from_slice(trace.probs.row(r));
                row[train.labels[i]] -= 1.0;
                row.iter_mut().for_each(|g| *g /= b);
            }
            let grads = backprop(&model, &trace, grad, true, false)?;

            let mut params = flat_params(&model);
            let flat_grads = flat_grads(&grads);
            super::optimizer_step(&mut params, &flat_grads, &mut opt_state, &opt)?;
            set_flat_params(&mut model, &params);

            for (block, cache) in model.hidden.iter_mut().zip(&trace.norm_caches) {
                let n = &mut block.norm;
                for (s, bm) in n.source_mean.iter_mut().zip(&cache.batch_mean) {
                    *s = (1.0 - m) * *s + m * bm;
                }
                for (s, bs) in n.source_std.iter_mut().zip(&cache.batch_std) {
                    *s = (1.0 - m) * *s + m * bs;
                }
            }
        }
    }
    Ok(model)
}

// Layout: per hidden block W, b, gamma, beta; then head W, b.
fn flat_params(model: &ModelState) -> Vec<f64> {
    let mut out = Vec::new();
    for h in &model.hidden {
        out.extend_from_slice(&h.dense.weights);
        out.extend_from_slice(&h.dense.bias);
        out.extend_from_slice(&h.norm.gamma);
        out.extend_from_slice(&h.norm.beta);
    }
    out.extend_from_slice(&model.head.weights);
    out.extend_from_slice(&model.head.bias);
    out
}

fn flat_grads(g: &super::FullGrads) -> Vec<f64> {
    let mut out = Vec::new();
    let layers = g.affine.gamma.len();
    for l in 0..layers {
        out.extend_from_slice(&g.dense[l].0);
        out.extend_from_slice(&g.dense[l].1);
        out.extend_from_slice(&g.affine.gamma[l]);
        out.extend_from_slice(&g.affine.beta[l]);
    }
    out.extend_from_slice(&g.dense[layers].0);
    out.extend_from_slice(&g.dense[layers].1);
    out
}

fn set_flat_params(model: &mut ModelState, flat: &[f64]) {
    let mut off = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&flat[off..off + dst.len()]);
        off += dst.len();
    };
    for h in &mut model.hidden {
        take(&mut h.dense.weights);
        take(&mut h.dense.bias);
        take(&mut h.norm.gamma);
        take(&mut h.norm.beta);
    }
    take(&mut model.head.weights);
    take(&mut model.head.bias);
}
