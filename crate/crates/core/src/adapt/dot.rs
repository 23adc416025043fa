//! Dynamic online re-weighting.
//!
//! A momentum-tracked class-frequency estimate `z` (initialized uniform) assigns each
//! sample a weight inversely proportional to the estimated frequency of its predicted
//! class, so classes that dominate recent predictions contribute less to the update.

use serde::{Deserialize, Serialize};

use crate::matrix::{argmax, softmax};
use crate::{Error, FeatureMatrix, Result};

pub const DEFAULT_LAMBDA: f64 = 0.9;
pub const DEFAULT_WEIGHT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DotVariant {
    /// `w_b = 1 / (z[argmax p_b] + eps)`.
    #[default]
    Hard,
    /// `w_b = sum_k p_b[k] / (z[k] + eps)`.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFreqVector {
    pub z: Vec<f64>,
    /// Momentum of the running estimate.
    pub lambda: f64,
    /// Guard added to `z` in the weight denominator.
    pub eps: f64,
}

impl ClassFreqVector {
    pub fn uniform(classes: usize, lambda: f64) -> Self {
        Self {
            z: vec![1.0 / classes as f64; classes],
            lambda,
            eps: DEFAULT_WEIGHT_EPS,
        }
    }

    pub fn classes(&self) -> usize {
        self.z.len()
    }

    pub fn update(&mut self, probs: &FeatureMatrix) {
        self.z = update_z(&self.z, probs, self.lambda);
    }
}

/// Unnormalized per-sample weights from the current frequency estimate.
pub fn dot_weights(probs: &FeatureMatrix, z: &ClassFreqVector, variant: DotVariant) -> Vec<f64> {
    (0..probs.rows())
        .map(|r| {
            let p = probs.row(r);
            match variant {
                DotVariant::Hard => 1.0 / (z.z[argmax(p)] + z.eps),
                DotVariant::Soft => p.iter().zip(&z.z).map(|(pk, zk)| pk / (zk + z.eps)).sum(),
            }
        })
        .collect()
}

/// Rescales weights to mean one: `B * w_b / sum(w)`.
///
/// Identical weights map to exactly `1.0`, so re-weighting under a uniform estimate
/// reproduces the unweighted update bit for bit.
pub fn normalize_weights(w: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Contract(format!("cannot normalize weights with sum {total}")));
    }
    if w.iter().all(|&x| x == w[0]) {
        return Ok(vec![1.0; w.len()]);
    }
    let b = w.len() as f64;
    Ok(w.iter().map(|x| b * x / total).collect())
}

/// `z' = lambda * z + (1 - lambda) / B * sum_b p_b`.
pub fn update_z(z: &[f64], probs: &FeatureMatrix, lambda: f64) -> Vec<f64> {
    let b = probs.rows() as f64;
    let mut mean = vec![0.0; z.len()];
    for r in 0..probs.rows() {
        for (m, p) in mean.iter_mut().zip(probs.row(r)) {
            *m += p;
        }
    }
    z.iter()
        .zip(mean)
        .map(|(zk, s)| lambda * zk + (1.0 - lambda) / b * s)
        .collect()
}

/// Logit adjustment by the estimated class prior: `softmax(logits - tau * ln z)`, with
/// `z` clamped below at `eps`.
pub fn la_adjust(logits: &FeatureMatrix, z: &[f64], tau: f64, eps: f64) -> FeatureMatrix {
    let shift: Vec<f64> = z.iter().map(|&zk| tau * zk.max(eps).ln()).collect();
    let mut out = FeatureMatrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let adj: Vec<f64> = logits.row(r).iter().zip(&shift).map(|(l, s)| l - s).collect();
        out.row_mut(r).copy_from_slice(&softmax(&adj));
    }
    out
}

/// Keep mask for sample-drop: a sample is dropped when its pseudo class has been kept
/// more often than the average class so far.
pub fn sample_drop_filter(used_counts: &[usize], pseudo_labels: &[usize]) -> Vec<bool> {
    let mean = used_counts.iter().sum::<usize>() as f64 / used_counts.len().max(1) as f64;
    pseudo_labels
        .iter()
        .map(|&k| used_counts[k] as f64 <= mean)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot(labels: &[usize], k: usize) -> FeatureMatrix {
        let mut m = FeatureMatrix::zeros(labels.len(), k);
        for (r, &y) in labels.iter().enumerate() {
            m.set(r, y, 1.0);
        }
        m
    }

    #[test]
    fn uniform_z_gives_equal_hard_weights() {
        let z = ClassFreqVector::uniform(4, 0.9);
        let p = FeatureMatrix::from_rows(&[vec![0.7, 0.1, 0.1, 0.1], vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let w = dot_weights(&p, &z, DotVariant::Hard);
        let expected = 4.0 / (1.0 + 4.0 * z.eps);
        assert!(w.iter().all(|x| (x - expected).abs() < 1e-12));
        assert_eq!(normalize_weights(&w).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn soft_equals_hard_on_one_hot() {
        let z = ClassFreqVector { z: vec![0.5, 0.3, 0.2], lambda: 0.9, eps: 1e-6 };
        let p = one_hot(&[0, 2, 1, 2], 3);
        assert_eq!(dot_weights(&p, &z, DotVariant::Soft), dot_weights(&p, &z, DotVariant::Hard));
    }

    #[test]
    fn normalize_weights_edge_cases() {
        assert_eq!(normalize_weights(&[3.5]).unwrap(), vec![1.0]);
        assert_eq!(normalize_weights(&[2.0, 2.0, 2.0]).unwrap(), vec![1.0; 3]);
        assert!(matches!(normalize_weights(&[0.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn update_z_fixed_point_and_frozen() {
        let p = FeatureMatrix::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        let z = update_z(&[0.4, 0.6], &p, 0.9);
        assert!((z[0] - 0.4).abs() < 1e-15 && (z[1] - 0.6).abs() < 1e-15);
        assert_eq!(update_z(&[0.3, 0.7], &p, 1.0), vec![0.3, 0.7]);
    }

    #[test]
    fn la_uniform_and_zero_tau_are_identity() {
        let logits = FeatureMatrix::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let plain = crate::matrix::softmax_rows(&logits);
        let u = la_adjust(&logits, &[1.0 / 3.0; 3], 1.0, 1e-6);
        for (a, b) in u.as_slice().iter().zip(plain.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let t0 = la_adjust(&logits, &[0.7, 0.2, 0.1], 0.0, 1e-6);
        assert_eq!(t0, plain);
    }

    #[test]
    fn sample_drop_rules() {
        assert_eq!(sample_drop_filter(&[3, 3], &[0, 1]), vec![true, true]);
        assert_eq!(sample_drop_filter(&[0, 0, 0], &[0, 1, 2]), vec![true; 3]);
        assert_eq!(sample_drop_filter(&[10, 0], &[0, 1]), vec![false, true]);
    }

    proptest! {
        #[test]
        fn raising_z_k_reweights_monotonically(
            z in prop::collection::vec(0.05f64..1.0, 3..6),
            labels in prop::collection::vec(0usize..3, 2..10),
            bump in 0.01f64..0.5,
        ) {
            let k = z.len();
            let total: f64 = z.iter().sum();
            let zn: Vec<f64> = z.iter().map(|v| v / total).collect();
            let p = one_hot(&labels, k);
            let before = ClassFreqVector { z: zn.clone(), lambda: 0.9, eps: 1e-6 };
            let mut raised = before.clone();
            raised.z[0] += bump;
            let w0 = dot_weights(&p, &before, DotVariant::Hard);
            let w1 = dot_weights(&p, &raised, DotVariant::Hard);
            for (b, &y) in labels.iter().enumerate() {
                if y == 0 { prop_assert!(w1[b] < w0[b]); } else { prop_assert_eq!(w1[b], w0[b]); }
            }
            let has_k = labels.contains(&0);
            let n0 = normalize_weights(&w0).unwrap();
            let n1 = normalize_weights(&w1).unwrap();
            if has_k && labels.iter().any(|&y| y != 0) {
                for (b, &y) in labels.iter().enumerate() {
                    if y != 0 { prop_assert!(n1[b] > n0[b]); }
                }
            }
        }

        #[test]
        fn normalized_mean_is_one(w in prop::collection::vec(1e-3f64..1e3, 1..64)) {
            let n = normalize_weights(&w).unwrap();
            let mean = n.iter().sum::<f64>() / n.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
            for i in 1..w.len() {
                prop_assert_eq!(w[i] > w[i - 1], n[i] > n[i - 1]);
            }
        }
    }
}
