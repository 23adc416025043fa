//! One online adaptation step per arriving mini-batch.
//!
//! 1. Forward with the current affine parameters; test-time statistics advance.
//! 2. Predictions (optionally logit-adjusted) are the step's output.
//! 3. Per-sample losses, re-weighted by the class-frequency estimate when enabled.
//! 4. Gradient step on `gamma`/`beta` unless every sample was gated out.
//! 5. The class-frequency estimate absorbs the raw batch probabilities.

use serde::{Deserialize, Serialize};

use super::dot::{dot_weights, la_adjust, normalize_weights, sample_drop_filter, ClassFreqVector};
use super::method::{MethodSpec, Strategy};
use crate::netcore::{backward_affine_impl, optimizer_step, ForwardConfig, ForwardTrace, ModelState, OptimizerState};
use crate::{Error, FeatureMatrix, Result};

/// Episode-owned state besides the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptState {
    pub z: ClassFreqVector,
    pub optimizer: OptimizerState,
    /// Per-class count of samples kept by sample-drop.
    pub kept_counts: Vec<usize>,
    pub steps: u64,
    pub updates: u64,
}

impl AdaptState {
    pub fn new(classes: usize, lambda: f64) -> Self {
        Self {
            z: ClassFreqVector::uniform(classes, lambda),
            optimizer: OptimizerState::default(),
            kept_counts: vec![0; classes],
            steps: 0,
            updates: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `B x K` probabilities reported for this batch.
    pub predictions: FeatureMatrix,
    pub pseudo_labels: Vec<usize>,
    /// Whether the affine parameters were updated.
    pub updated: bool,
    /// Number of samples that passed the loss gate with non-zero weight.
    pub contributing: usize,
    /// `1/B * sum_b w_b * L_b`.
    pub loss: f64,
    /// Normalized sample weights applied to the loss.
    pub weights: Vec<f64>,
}

pub fn adapt_step(
    model: &mut ModelState,
    batch: &FeatureMatrix,
    method: &MethodSpec,
    state: &mut AdaptState,
) -> Result<StepOutput> {
    let cfg = ForwardConfig { mode: method.norm, init: method.init, update_stats: true };
    let trace = model.forward_mut(batch, &cfg)?;
    let out = step_from_trace(model, &trace, method, state)?;
    state.steps += 1;
    Ok(out)
}

/// Predictions without touching any state beyond first-time statistics initialization.
pub fn predict(model: &mut ModelState, batch: &FeatureMatrix, method: &MethodSpec, state: &AdaptState) -> Result<FeatureMatrix> {
    let cfg = ForwardConfig { mode: method.norm, init: method.init, update_stats: false };
    let trace = model.forward_mut(batch, &cfg)?;
    Ok(reported_probs(&trace, method, state))
}

fn reported_probs(trace: &ForwardTrace, method: &MethodSpec, state: &AdaptState) -> FeatureMatrix {
    match method.strategy {
        Strategy::LogitAdjust { tau } => la_adjust(&trace.logits, &state.z.z, tau, state.z.eps),
        _ => trace.probs.clone(),
    }
}

pub(crate) fn step_from_trace(
    model: &mut ModelState,
    trace: &ForwardTrace,
    method: &MethodSpec,
    state: &mut AdaptState,
) -> Result<StepOutput> {
    let predictions = reported_probs(trace, method, state);
    let pseudo_labels = predictions.argmax_rows();
    let b = predictions.rows();
    let k = predictions.cols();

    let Some(loss_spec) = method.loss else {
        return Ok(StepOutput {
            predictions,
            pseudo_labels,
            updated: false,
            contributing: 0,
            loss: 0.0,
            weights: vec![1.0; b],
        });
    };

    let mut grad_logits = FeatureMatrix::zeros(b, k);
    let mut losses = Vec::with_capacity(b);
    let mut used = Vec::with_capacity(b);
    for r in 0..b {
        let s = loss_spec.evaluate(predictions.row(r));
        grad_logits.row_mut(r).copy_from_slice(&s.grad);
        losses.push(s.loss);
        used.push(s.used);
    }

    let mut weights = match method.dot {
        Some(variant) => normalize_weights(&dot_weights(&predictions, &state.z, variant))?,
        None => vec![1.0; b],
    };
    let keep = match method.strategy {
        Strategy::SampleDrop => Some(sample_drop_filter(&state.kept_counts, &pseudo_labels)),
        _ => None,
    };
    if let Some(mask) = &keep {
        for (w, &kp) in weights.iter_mut().zip(mask) {
            if !kp {
                *w = 0.0;
            }
        }
    }

    let loss = losses.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric { layer: model.hidden.len(), detail: "adaptation loss".to_owned() });
    }
    let contributing = used.iter().zip(&weights).filter(|(u, w)| **u && **w > 0.0).count();

    let updated = contributing > 0;
    if updated {
        let grads = backward_affine_impl(model, trace, &grad_logits, &weights, method.ema_gradients)?;
        let mut params = model.affine_params();
        optimizer_step(&mut params, &grads.flatten(), &mut state.optimizer, &method.optimizer)?;
        model.set_affine_params(&params)?;
        state.updates += 1;
    }

    if let Some(mask) = &keep {
        for (&kp, &y) in mask.iter().zip(&pseudo_labels) {
            if kp {
                state.kept_counts[y] += 1;
            }
        }
    }
    if method.tracks_z() {
        state.z.update(&trace.probs);
    }

    Ok(StepOutput { predictions, pseudo_labels, updated, contributing, loss, weights })
}

/// A model copy bound to a method: the unit that consumes one test stream.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub model: ModelState,
    pub method: MethodSpec,
    pub state: AdaptState,
}

impl Adapter {
    pub fn new(source: &ModelState, method: MethodSpec) -> Result<Self> {
        method.validate()?;
        let mut model = source.clone();
        model.reset_test_stats();
        model.set_alpha(method.alpha);
        let state = AdaptState::new(model.classes(), method.lambda);
        Ok(Self { model, method, state })
    }

    pub fn step(&mut self, batch: &FeatureMatrix) -> Result<StepOutput> {
        adapt_step(&mut self.model, batch, &self.method, &mut self.state)
    }

    pub fn predict(&mut self, batch: &FeatureMatrix) -> Result<FeatureMatrix> {
        predict(&mut self.model, batch, &self.method, &self.state)
    }
}
