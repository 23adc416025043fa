//! Central-difference oracle for [`backward_affine`](super::backward_affine).
//!
//! Quantities that the analytic backward treats as constants are frozen at their values
//! from a reference forward pass: the renormalization factors `r` and `d`, the
//! test-time statistics (no EMA update between evaluations), gates, pseudo labels and
//! the Ent-W multiplier. What remains is the surrogate objective whose exact gradient
//! the backward pass claims to compute.

use super::{backward_affine, ForwardConfig, ModelState};
use crate::adapt::loss::{Detached, LossSpec};
use crate::normalize::{InitStrategy, NormMode};
use crate::{Error, FeatureMatrix, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdObjective {
    /// One of the adaptation losses.
    Loss(LossSpec),
    /// `L_b = 0.5 * sum_k logit_{b,k}^2`.
    SquaredLogits,
}

/// Largest relative error between `backward_affine` and central differences over every
/// `gamma` and `beta` entry. Relative error uses `max(|analytic|, |numeric|, 1e-12)` as
/// the denominator.
pub fn finite_diff_check(
    model: &ModelState,
    batch: &FeatureMatrix,
    mode: NormMode,
    objective: &FdObjective,
    sample_weights: &[f64],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Input(format!("step size must be > 0, got {h}")));
    }
    let cfg = ForwardConfig { mode, init: InitStrategy::First, update_stats: false };
    let mut prepared = model.clone();
    let trace = prepared.forward_mut(batch, &cfg)?;
    let factors = trace.tbr_factors();
    let b = batch.rows();
    let k = model.classes();

    let detached: Vec<Option<Detached>> = (0..b)
        .map(|r| match objective {
            FdObjective::Loss(spec) => Some(spec.detached(trace.probs.row(r))),
            FdObjective::SquaredLogits => None,
        })
        .collect();

    let mut grad_logits = FeatureMatrix::zeros(b, k);
    for r in 0..b {
        let g = match objective {
            FdObjective::Loss(spec) => spec.evaluate(trace.probs.row(r)).grad,
            FdObjective::SquaredLogits => trace.logits.row(r).to_vec(),
        };
        grad_logits.row_mut(r).copy_from_slice(&g);
    }
    let analytic = backward_affine(&prepared, &trace, &grad_logits, sample_weights)?.flatten();

    let frozen = (mode == NormMode::Tbr).then_some(factors.as_slice());
    let objective_at = |params: &[f64]| -> Result<f64> {
        let mut m = prepared.clone();
        m.set_affine_params(params)?;
        let t = m.forward_impl(batch, &cfg, frozen)?;
        let mut total = 0.0;
        for r in 0..b {
            let l = match detached[r] {
                Some(d) => d.coef * d.base_loss(t.probs.row(r)),
                None => 0.5 * t.logits.row(r).iter().map(|z| z * z).sum::<f64>(),
            };
            total += sample_weights[r] * l;
        }
        Ok(total / b as f64)
    };

    let base = prepared.affine_params();
    let mut worst: f64 = 0.0;
    let mut p = base.clone();
    for i in 0..base.len() {
        p[i] = base[i] + h;
        let fp = objective_at(&p)?;
        p[i] = base[i] - h;
        let fm = objective_at(&p)?;
        p[i] = base[i];
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
