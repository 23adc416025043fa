//! Synthetic source / shifted-test classification tasks.
//!
//! Both splits come from a K-component Gaussian mixture with unit-variance components
//! whose means sit on a sphere of radius `radius`. The test split is then covariate
//! shifted; labels never change.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::netcore::{train_source, ModelSpec, ModelState, TrainConfig};
use crate::rng::{self, purpose};
use crate::streams::LabeledDataset;
use crate::{Error, FeatureMatrix, Result};

pub const DEFAULT_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Shift {
    /// Adds zero-mean Gaussian noise with this standard deviation.
    Noise(f64),
    /// Multiplies every feature.
    Scale(f64),
    /// Blends a random rotation with the identity: `x ((1 - s) I + s R)`.
    Affine(f64),
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shift::Noise(s) => write!(f, "noise:{s}"),
            Shift::Scale(s) => write!(f, "scale:{s}"),
            Shift::Affine(s) => write!(f, "affine:{s}"),
        }
    }
}

impl FromStr for Shift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, mag) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("shift `{s}` must look like kind:magnitude")))?;
        let mag: f64 = mag
            .parse()
            .map_err(|_| Error::Parse(format!("bad shift magnitude in `{s}`")))?;
        if !mag.is_finite() {
            return Err(Error::Parse(format!("bad shift magnitude in `{s}`")));
        }
        match kind {
            "noise" if mag >= 0.0 => Ok(Shift::Noise(mag)),
            "scale" => Ok(Shift::Scale(mag)),
            "affine" => Ok(Shift::Affine(mag)),
            _ => Err(Error::Parse(format!("unknown shift `{s}` (noise:s, scale:s, affine:s)"))),
        }
    }
}

impl TryFrom<String> for Shift {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Shift> for String {
    fn from(s: Shift) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub shift: Shift,
    pub radius: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 16,
            n_train: 5000,
            n_test: 2000,
            shift: Shift::Noise(2.0),
            radius: DEFAULT_RADIUS,
            seed: 2020,
        }
    }
}

impl TaskSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

pub fn make_synthetic_task(spec: &TaskSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::Config("synthetic task needs K >= 2 and D >= 2".to_owned()));
    }
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::Config("synthetic task needs non-empty splits".to_owned()));
    }
    let mut rng = rng::seeded(spec.seed, purpose::TASK_MEANS);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| spec.radius * x / norm).collect()
        })
        .collect();

    let train = sample_mixture(&means, spec.n_train, &mut rng::seeded(spec.seed, purpose::TASK_TRAIN))?;
    let mut test = sample_mixture(&means, spec.n_test, &mut rng::seeded(spec.seed, purpose::TASK_TEST))?;
    apply_shift(&mut test.features, spec.shift, &mut rng::seeded(spec.seed, purpose::TASK_SHIFT));
    Ok((train, test))
}

/// Balanced labels (`i mod K`) with unit-variance Gaussian features around each mean.
fn sample_mixture(means: &[Vec<f64>], n: usize, rng: &mut rng::Rng) -> Result<LabeledDataset> {
    let k = means.len();
    let d = means[0].len();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for m in &means[y] {
            let e: f64 = rng.sample(StandardNormal);
            data.push(m + e);
        }
    }
    LabeledDataset::new(FeatureMatrix::from_vec(n, d, data)?, labels, k)
}

fn apply_shift(x: &mut FeatureMatrix, shift: Shift, rng: &mut rng::Rng) {
    match shift {
        Shift::Noise(s) => {
            for v in x.as_mut_slice() {
                let e: f64 = rng.sample(StandardNormal);
                *v += s * e;
            }
        }
        Shift::Scale(s) => x.as_mut_slice().iter_mut().for_each(|v| *v *= s),
        Shift::Affine(s) => {
            let d = x.cols();
            let rot = random_rotation(d, rng);
            // blended = (1 - s) I + s R, applied as a row-vector product x * blended
            let mut blended = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    let id = if i == j { 1.0 } else { 0.0 };
                    blended[i * d + j] = (1.0 - s) * id + s * rot[i * d + j];
                }
            }
            for r in 0..x.rows() {
                let row = x.row(r).to_vec();
                let out = x.row_mut(r);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = (0..d).map(|i| row[i] * blended[i * d + j]).sum();
                }
            }
        }
    }
}

/// Orthogonal matrix from Gram-Schmidt on a Gaussian matrix (row-major).
fn random_rotation(d: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &rows {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    rows.concat()
}

/// A synthetic task with its trained source model.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub task: TaskSpec,
    pub model: ModelState,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Default source network widths.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Adam learning rate tuned for the default synthetic task on seeds 1000..=1004.
pub const SYNTHETIC_TASK_LR: f64 = 1e-2;

/// Generates the task and trains a source model; every seed is `task.seed`.
pub fn prepare_task(task: &TaskSpec, hidden: &[usize], train_cfg: &TrainConfig) -> Result<PreparedTask> {
    let (train, test) = make_synthetic_task(task)?;
    let spec = ModelSpec {
        input_dim: task.dim,
        hidden: hidden.to_vec(),
        classes: task.classes,
        seed: task.seed,
    };
    let cfg = TrainConfig { seed: task.seed, ..*train_cfg };
    let model = train_source(&spec, &train, &cfg)?;
    Ok(PreparedTask { task: task.clone(), model, train, test })
}
