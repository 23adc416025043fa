//! Feedforward classifier: `[dense -> norm -> ReLU] x L -> dense head -> softmax`.
//!
//! During adaptation only the normalization affine parameters (`gamma`, `beta`) receive
//! gradients; dense weights stay frozen. [`train_source`] is the one place where every
//! parameter is trained.

mod checkpoint;
mod fdcheck;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION};
pub use fdcheck::{finite_diff_check, FdObjective};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};
pub use train::{train_source, TrainConfig};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::matrix::softmax_rows;
use crate::normalize::{
    self, batch_stats, InitContext, InitStrategy, NormCache, NormForwardOptions, NormLayerState, NormMode,
};
use crate::rng::{self, purpose};
use crate::{Error, FeatureMatrix, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be >= 1".to_owned()));
        }
        Ok(())
    }
}

/// Dense layer `y = x W^T + b`, weights stored `output x input` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub input: usize,
    pub output: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn init(input: usize, output: usize, rng: &mut rng::Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weights = (0..input * output).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { input, output, weights, bias: vec![0.0; output] }
    }

    fn apply(&self, x: &FeatureMatrix) -> FeatureMatrix {
        x.affine(&self.weights, &self.bias, self.output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenBlock {
    pub dense: DenseLayer,
    pub norm: NormLayerState,
}

/// Network parameters (dense weights and normalization affine parameters) together with
/// both sets of normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub hidden: Vec<HiddenBlock>,
    pub head: DenseLayer,
}

impl ModelState {
    /// Fresh model with uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::seeded(spec.seed, purpose::WEIGHT_INIT);
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        let mut fan_in = spec.input_dim;
        for &w in &spec.hidden {
            hidden.push(HiddenBlock {
                dense: DenseLayer::init(fan_in, w, &mut rng),
                norm: NormLayerState::new(w),
            });
            fan_in = w;
        }
        let head = DenseLayer::init(fan_in, spec.classes, &mut rng);
        Ok(Self { spec: spec.clone(), hidden, head })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &NormLayerState> {
        self.hidden.iter().map(|h| &h.norm)
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut NormLayerState> {
        self.hidden.iter_mut().map(|h| &mut h.norm)
    }

    /// Sets the test-time EMA coefficient of every normalization layer.
    pub fn set_alpha(&mut self, alpha: f64) {
        self.norm_layers_mut().for_each(|n| n.alpha = alpha);
    }

    /// Clears test-time statistics in every layer.
    pub fn reset_test_stats(&mut self) {
        self.norm_layers_mut().for_each(NormLayerState::reset_test_stats);
    }

    /// `gamma` then `beta` of each normalization layer, in layer order.
    pub fn affine_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for n in self.norm_layers() {
            out.extend_from_slice(&n.gamma);
            out.extend_from_slice(&n.beta);
        }
        out
    }

    pub fn set_affine_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.norm_layers().map(|n| 2 * n.channels()).sum();
        if flat.len() != total {
            return Err(Error::Config(format!("expected {total} affine parameters, got {}", flat.len())));
        }
        let mut off = 0;
        for n in self.norm_layers_mut() {
            let c = n.channels();
            n.gamma.copy_from_slice(&flat[off..off + c]);
            n.beta.copy_from_slice(&flat[off + c..off + 2 * c]);
            off += 2 * c;
        }
        Ok(())
    }

    /// L2 norm of all `gamma` entries.
    pub fn gamma_norm(&self) -> f64 {
        self.norm_layers()
            .flat_map(|n| n.gamma.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Dense weights and biases (including the head), in layer order.
    pub fn dense_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for h in &self.hidden {
            out.extend_from_slice(&h.dense.weights);
            out.extend_from_slice(&h.dense.bias);
        }
        out.extend_from_slice(&self.head.weights);
        out.extend_from_slice(&self.head.bias);
        out
    }

    /// Forward pass that advances this model's statistics in place.
    pub fn forward_mut(&mut self, batch: &FeatureMatrix, config: &ForwardConfig) -> Result<ForwardTrace> {
        self.forward_impl(batch, config, None)
    }

    pub(crate) fn forward_impl(
        &mut self,
        batch: &FeatureMatrix,
        config: &ForwardConfig,
        frozen: Option<&[(Vec<f64>, Vec<f64>)]>,
    ) -> Result<ForwardTrace> {
        if batch.cols() != self.spec.input_dim {
            return Err(Error::Config(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.spec.input_dim
            )));
        }
        if !batch.is_finite() {
            return Err(Error::Numeric { layer: 0, detail: "input batch".to_owned() });
        }
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut norm_caches = Vec::with_capacity(self.hidden.len());
        let mut norm_outputs = Vec::with_capacity(self.hidden.len());
        let mut h = batch.clone();
        for (i, block) in self.hidden.iter_mut().enumerate() {
            let a = block.dense.apply(&h);
            check_finite(&a, i, "dense output")?;
            if config.mode.uses_test_ema() && !block.norm.initialized {
                let (m, s) = batch_stats(&a, block.norm.eps);
                normalize::init_stats_in_place(
                    &mut block.norm,
                    config.init,
                    InitContext { first_batch: Some((&m, &s)) },
                )?;
            }
            let opts = NormForwardOptions {
                update_ema: config.update_stats,
                frozen_factors: frozen.map(|f| (f[i].0.as_slice(), f[i].1.as_slice())),
            };
            let (out, cache) = normalize::normalize_forward_in_place(&a, &mut block.norm, config.mode, opts)?;
            check_finite(&out, i, "normalization output")?;
            let mut act = out.clone();
            act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            inputs.push(h);
            norm_caches.push(cache);
            norm_outputs.push(out);
            h = act;
        }
        let logits = self.head.apply(&h);
        check_finite(&logits, self.hidden.len(), "logits")?;
        inputs.push(h);
        let probs = softmax_rows(&logits);
        Ok(ForwardTrace {
            mode: config.mode,
            inputs,
            norm_caches,
            norm_outputs,
            logits,
            probs,
        })
    }
}

fn check_finite(m: &FeatureMatrix, layer: usize, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { layer, detail: what.to_owned() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardConfig {
    pub mode: NormMode,
    /// Used when a layer's test-time statistics are not yet initialized.
    pub init: InitStrategy,
    /// Advance the test-time EMA after normalizing (TestEma / Tbr).
    pub update_stats: bool,
}

impl ForwardConfig {
    pub fn new(mode: NormMode) -> Self {
        Self { mode, init: InitStrategy::First, update_stats: true }
    }
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: NormMode,
    /// Input to each dense layer; the last entry feeds the head.
    pub inputs: Vec<FeatureMatrix>,
    pub norm_caches: Vec<NormCache>,
    /// Normalization outputs before the ReLU.
    pub norm_outputs: Vec<FeatureMatrix>,
    pub logits: FeatureMatrix,
    pub probs: FeatureMatrix,
}

impl ForwardTrace {
    pub(crate) fn tbr_factors(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.norm_caches
            .iter()
            .map(|c| (c.r.clone().unwrap_or_default(), c.d.clone().unwrap_or_default()))
            .collect()
    }
}

/// Result of the pure [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: FeatureMatrix,
    pub probs: FeatureMatrix,
    pub trace: ForwardTrace,
    pub model: ModelState,
}

/// Pure forward pass: returns predictions and the model with advanced statistics. Test-time
/// statistics that are not yet initialized are seeded from this batch.
pub fn forward(model: &ModelState, batch: &FeatureMatrix, mode: NormMode) -> Result<ForwardOutput> {
    let mut next = model.clone();
    let trace = next.forward_mut(batch, &ForwardConfig::new(mode))?;
    Ok(ForwardOutput {
        logits: trace.logits.clone(),
        probs: trace.probs.clone(),
        trace,
        model: next,
    })
}

/// Gradients for every normalization layer's affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl GradSet {
    /// Same layout as [`ModelState::affine_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (g, b) in self.gamma.iter().zip(&self.beta) {
            out.extend_from_slice(g);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&g| g == 0.0)
    }
}

/// Gradients for all parameters, used by source training.
#[derive(Debug, Clone)]
pub(crate) struct FullGrads {
    pub affine: GradSet,
    /// Per hidden layer, then the head: `(weights, bias)`.
    pub dense: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Gradient of `1/B * sum_b w_b * L_b` w.r.t. every `gamma` and `beta`, given each sample's
/// `dL_b/dlogits` as the rows of `grad_logits`. Dense weights get no gradient.
pub fn backward_affine(
    model: &ModelState,
    trace: &ForwardTrace,
    grad_logits: &FeatureMatrix,
    sample_weights: &[f64],
) -> Result<GradSet> {
    backward_affine_impl(model, trace, grad_logits, sample_weights, false)
}

pub(crate) fn backward_affine_impl(
    model: &ModelState,
    trace: &ForwardTrace,
    grad_logits: &FeatureMatrix,
    sample_weights: &[f64],
    allow_test_ema: bool,
) -> Result<GradSet> {
    let allowed = trace.mode.supports_gradients() || (allow_test_ema && trace.mode == NormMode::TestEma);
    if !allowed {
        return Err(Error::Contract(format!(
            "cannot back-propagate through a {} forward",
            trace.mode.name()
        )));
    }
    let b = trace.logits.rows();
    if sample_weights.len() != b {
        return Err(Error::Config(format!("{} sample weights for a batch of {b}", sample_weights.len())));
    }
    if sample_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("sample weights must be finite and >= 0".to_owned()));
    }
    let mut g = grad_logits.clone();
    for (r, w) in sample_weights.iter().enumerate() {
        let s = w / b as f64;
        g.row_mut(r).iter_mut().for_each(|x| *x *= s);
    }
    Ok(backprop(model, trace, g, false, allow_test_ema)?.affine)
}

/// Back-propagates an already-scaled logit gradient.
pub(crate) fn backprop(
    model: &ModelState,
    trace: &ForwardTrace,
    grad_logits: FeatureMatrix,
    want_dense: bool,
    allow_test_ema: bool,
) -> Result<FullGrads> {
    if grad_logits.rows() != trace.logits.rows() || grad_logits.cols() != trace.logits.cols() {
        return Err(Error::Config("logit gradient shape does not match trace".to_owned()));
    }
    let layers = model.hidden.len();
    let mut dense = Vec::new();
    let mut gammas = vec![Vec::new(); layers];
    let mut betas = vec![Vec::new(); layers];

    if want_dense {
        dense.push(dense_grads(&grad_logits, &trace.inputs[layers]));
    }
    let mut grad_h = grad_logits.matmul_weights(&model.head.weights, model.head.input);

    for l in (0..layers).rev() {
        let pre = &trace.norm_outputs[l];
        for (gv, pv) in grad_h.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            if *pv <= 0.0 {
                *gv = 0.0;
            }
        }
        let ng = normalize::normalize_backward_impl(&grad_h, &trace.norm_caches[l], &model.hidden[l].norm, allow_test_ema)?;
        gammas[l] = ng.gamma;
        betas[l] = ng.beta;
        if want_dense {
            dense.push(dense_grads(&ng.input, &trace.inputs[l]));
        }
        if l > 0 {
            let d = &model.hidden[l].dense;
            grad_h = ng.input.matmul_weights(&d.weights, d.input);
        }
    }
    dense.reverse();
    Ok(FullGrads { affine: GradSet { gamma: gammas, beta: betas }, dense })
}

/// `(dW, db)` for `y = x W^T + b` given `dL/dy`.
fn dense_grads(grad_out: &FeatureMatrix, input: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let (out, inp) = (grad_out.cols(), input.cols());
    let mut dw = vec![0.0; out * inp];
    let mut db = vec![0.0; out];
    for r in 0..grad_out.rows() {
        let x = input.row(r);
        for (o, &g) in grad_out.row(r).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            for (w, xi) in dw[o * inp..(o + 1) * inp].iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(hidden: Vec<usize>) -> ModelSpec {
        ModelSpec { input_dim: 3, hidden, classes: 4, seed: 11 }
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
        let mut rng = rng::seeded(seed, 99);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec { classes: 1, ..spec(vec![]) }.validate().is_err());
        assert!(spec(vec![4, 0]).validate().is_err());
        assert!(spec(vec![]).validate().is_ok());
    }

    #[test]
    fn zero_head_gives_uniform() {
        let mut m = ModelState::init(&spec(vec![5])).unwrap();
        m.head.weights.iter_mut().for_each(|w| *w = 0.0);
        let out = forward(&m, &batch(6, 3, 1), NormMode::BatchStat).unwrap();
        assert!(out.logits.as_slice().iter().all(|&z| z == 0.0));
        assert!(out.probs.as_slice().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identity_head_softmax_by_hand() {
        let s = ModelSpec { input_dim: 2, hidden: vec![], classes: 2, seed: 0 };
        let mut m = ModelState::init(&s).unwrap();
        m.head.weights = vec![1.0, 0.0, 0.0, 1.0];
        let x = FeatureMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let out = forward(&m, &x, NormMode::SourceEma).unwrap();
        assert_eq!(out.logits.row(0), &[1.0, 2.0]);
        let e = std::f64::consts::E;
        assert!((out.probs.get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((out.probs.get(0, 1) - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn source_forward_is_stateless() {
        let m = ModelState::init(&spec(vec![5, 4])).unwrap();
        let x = batch(7, 3, 2);
        let a = forward(&m, &x, NormMode::SourceEma).unwrap();
        let b = forward(&a.model, &x, NormMode::SourceEma).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.model, m);
        assert_eq!(b.model, m);
    }

    #[test]
    fn forward_only_changes_statistics() {
        let m = ModelState::init(&spec(vec![5, 4])).unwrap();
        let out = forward(&m, &batch(8, 3, 3), NormMode::Tbr).unwrap();
        assert_eq!(out.model.dense_params(), m.dense_params());
        assert_eq!(out.model.affine_params(), m.affine_params());
        assert!(out.model.norm_layers().all(|n| n.initialized));
        for r in 0..out.probs.rows() {
            let s: f64 = out.probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let m = ModelState::init(&spec(vec![5])).unwrap();
        let err = forward(&m, &batch(2, 4, 1), NormMode::BatchStat).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_reports_layer() {
        let mut m = ModelState::init(&spec(vec![5, 4])).unwrap();
        m.hidden[1].dense.weights[0] = f64::INFINITY;
        let err = forward(&m, &batch(4, 3, 1), NormMode::BatchStat).unwrap_err();
        assert!(matches!(err, Error::Numeric { layer: 1, .. }), "{err}");
    }

    #[test]
    fn backward_rejects_source_trace_and_zero_weights_give_zero() {
        let m = ModelState::init(&spec(vec![5])).unwrap();
        let x = batch(4, 3, 5);
        let src = forward(&m, &x, NormMode::SourceEma).unwrap();
        let g = FeatureMatrix::zeros(4, 4);
        assert!(matches!(
            backward_affine(&m, &src.trace, &g, &[1.0; 4]),
            Err(Error::Contract(_))
        ));
        let out = forward(&m, &x, NormMode::BatchStat).unwrap();
        let mut gl = FeatureMatrix::zeros(4, 4);
        gl.as_mut_slice().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 - 7.0);
        let grads = backward_affine(&m, &out.trace, &gl, &[0.0; 4]).unwrap();
        assert!(grads.is_zero());
    }

    #[test]
    fn affine_param_roundtrip() {
        let mut m = ModelState::init(&spec(vec![2, 3])).unwrap();
        let p: Vec<f64> = (0..10).map(f64::from).collect();
        m.set_affine_params(&p).unwrap();
        assert_eq!(m.affine_params(), p);
        assert_eq!(m.hidden[1].norm.beta, vec![7.0, 8.0, 9.0]);
        assert!(m.set_affine_params(&p[..9]).is_err());
    }
}
