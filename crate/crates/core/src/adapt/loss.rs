//! Unsupervised adaptation losses with analytic gradients w.r.t. the logits.

use serde::{Deserialize, Serialize};

use crate::matrix::argmax;
use crate::{Error, Result};

/// Default confidence threshold for pseudo labels.
pub const DEFAULT_PL_THRESHOLD: f64 = 0.4;
/// Default Ent-W entropy threshold as a multiple of `ln K`.
pub const DEFAULT_ENTW_FACTOR: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Entropy,
    PseudoLabel,
    EntW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// `PseudoLabel`: probability threshold. `EntW`: entropy threshold as a multiple of
    /// `ln K`. Ignored for `Entropy`.
    pub threshold: f64,
}

impl LossSpec {
    pub fn entropy() -> Self {
        Self { kind: LossKind::Entropy, threshold: 0.0 }
    }

    pub fn pseudo_label(tau: f64) -> Self {
        Self { kind: LossKind::PseudoLabel, threshold: tau }
    }

    pub fn entw(factor_of_ln_k: f64) -> Self {
        Self { kind: LossKind::EntW, threshold: factor_of_ln_k }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(Error::Config(format!("loss threshold must be >= 0, got {}", self.threshold)));
        }
        if self.kind == LossKind::PseudoLabel && self.threshold > 1.0 {
            return Err(Error::Config("pseudo-label threshold must lie in [0, 1]".to_owned()));
        }
        Ok(())
    }

    /// Per-sample loss for a probability row.
    pub fn evaluate(&self, p: &[f64]) -> SampleLoss {
        match self.kind {
            LossKind::Entropy => {
                let (loss, grad) = entropy_loss(p);
                SampleLoss { loss, grad, used: true }
            }
            LossKind::PseudoLabel => pl_loss(p, self.threshold),
            LossKind::EntW => entw_loss(p, self.threshold * (p.len() as f64).ln()),
        }
    }

    /// The quantities held constant in the backward pass, taken at `p`.
    pub(crate) fn detached(&self, p: &[f64]) -> Detached {
        match self.kind {
            LossKind::Entropy => Detached { coef: 1.0, label: None },
            LossKind::PseudoLabel => {
                let k = argmax(p);
                let used = p[k] >= self.threshold;
                Detached { coef: if used { 1.0 } else { 0.0 }, label: Some(k) }
            }
            LossKind::EntW => {
                let tau = self.threshold * (p.len() as f64).ln();
                let h = entropy(p);
                let coef = if h < tau { (tau - h).exp() } else { 0.0 };
                Detached { coef, label: None }
            }
        }
    }
}

/// Per-sample loss, its gradient on the logits and whether the sample passed the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub used: bool,
}

/// Gate, detached multiplier and frozen label of one sample: the loss equals
/// `coef * base(p)` where `base` is entropy, or cross-entropy against `label`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Detached {
    pub coef: f64,
    pub label: Option<usize>,
}

impl Detached {
    pub(crate) fn base_loss(&self, p: &[f64]) -> f64 {
        match self.label {
            Some(k) => -p[k].ln(),
            None => entropy(p),
        }
    }
}

/// Shannon entropy with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `H(p) = -sum p log p` and `dH/dz_j = -p_j (log p_j + H)` for `p = softmax(z)`.
pub fn entropy_loss(p: &[f64]) -> (f64, Vec<f64>) {
    let h = entropy(p);
    let grad = p
        .iter()
        .map(|&pj| if pj > 0.0 { -pj * (pj.ln() + h) } else { 0.0 })
        .collect();
    (h, grad)
}

/// Cross-entropy against the argmax label when its probability reaches `tau`.
pub fn pl_loss(p: &[f64], tau: f64) -> SampleLoss {
    let k = argmax(p);
    if p[k] < tau {
        return SampleLoss { loss: 0.0, grad: vec![0.0; p.len()], used: false };
    }
    let mut grad = p.to_vec();
    grad[k] -= 1.0;
    SampleLoss { loss: -p[k].ln(), grad, used: true }
}

/// Entropy gated by `H < tau_h` and scaled by the detached weight `exp(tau_h - H)`.
pub fn entw_loss(p: &[f64], tau_h: f64) -> SampleLoss {
    let (h, grad) = entropy_loss(p);
    if h.is_nan() || h >= tau_h {
        return SampleLoss { loss: 0.0, grad: vec![0.0; p.len()], used: false };
    }
    let w = (tau_h - h).exp();
    SampleLoss {
        loss: w * h,
        grad: grad.into_iter().map(|g| w * g).collect(),
        used: true,
    }
}
