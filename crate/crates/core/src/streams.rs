//! Test-stream construction for the four evaluation scenarios.
//!
//! - IS (independent sampling): uniform shuffle.
//! - DS (dependent sampling): per class, draw `q_k ~ Dir_J(rho)`, allocate a `q_{k,j}`
//!   share of class `k` to piece `j`, shuffle within each piece, concatenate pieces
//!   `0..J`. Small `rho` concentrates each class in few pieces.
//! - CB (class-balanced): the dataset as given.
//! - CI (class-imbalanced): class `k` keeps `round(n_max * pi^(k/(K-1)))` samples, drawn
//!   without replacement, so class 0 is the most frequent.
//!
//! CI resampling happens before ordering.

use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::rng::{self, purpose};
use crate::{Error, FeatureMatrix, Result};

pub const DEFAULT_PIECES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(features: FeatureMatrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("dataset is empty".to_owned()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        histogram(&self.labels, self.classes)
    }

    /// Indices of class `k`, in dataset order.
    pub fn class_indices(&self, k: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| (y == k).then_some(i))
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

pub fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &y in labels {
        h[y] += 1;
    }
    h
}

/// Index sequence into a dataset, one entry per stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamOrder(pub Vec<usize>);

impl StreamOrder {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    Independent,
    Dependent { rho: f64, pieces: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Balance {
    Balanced,
    /// `n_max` defaults to the smallest class count of the source dataset.
    Imbalanced { pi: f64, n_max: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub sampling: Sampling,
    pub balance: Balance,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn is_cb(seed: u64) -> Self {
        Self { sampling: Sampling::Independent, balance: Balance::Balanced, seed }
    }

    pub fn ds_cb(rho: f64, seed: u64) -> Self {
        Self {
            sampling: Sampling::Dependent { rho, pieces: DEFAULT_PIECES },
            balance: Balance::Balanced,
            seed,
        }
    }

    pub fn is_ci(pi: f64, seed: u64) -> Self {
        Self {
            sampling: Sampling::Independent,
            balance: Balance::Imbalanced { pi, n_max: None },
            seed,
        }
    }

    pub fn ds_ci(rho: f64, pi: f64, seed: u64) -> Self {
        Self {
            sampling: Sampling::Dependent { rho, pieces: DEFAULT_PIECES },
            balance: Balance::Imbalanced { pi, n_max: None },
            seed,
        }
    }

    /// Builds a spec from a scenario name (`is+cb`, `ds+cb`, `is+ci`, `ds+ci`).
    pub fn from_parts(name: &str, rho: f64, pi: f64, pieces: usize, seed: u64) -> Result<Self> {
        let kind = ScenarioKind::from_str(name)?;
        let sampling = if kind.dependent() {
            Sampling::Dependent { rho, pieces }
        } else {
            Sampling::Independent
        };
        let balance = if kind.imbalanced() {
            Balance::Imbalanced { pi, n_max: None }
        } else {
            Balance::Balanced
        };
        let spec = Self { sampling, balance, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> ScenarioKind {
        match (self.sampling, self.balance) {
            (Sampling::Independent, Balance::Balanced) => ScenarioKind::IsCb,
            (Sampling::Dependent { .. }, Balance::Balanced) => ScenarioKind::DsCb,
            (Sampling::Independent, Balance::Imbalanced { .. }) => ScenarioKind::IsCi,
            (Sampling::Dependent { .. }, Balance::Imbalanced { .. }) => ScenarioKind::DsCi,
        }
    }

    pub fn rho(&self) -> Option<f64> {
        match self.sampling {
            Sampling::Dependent { rho, .. } => Some(rho),
            Sampling::Independent => None,
        }
    }

    pub fn pi(&self) -> Option<f64> {
        match self.balance {
            Balance::Imbalanced { pi, .. } => Some(pi),
            Balance::Balanced => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Sampling::Dependent { rho, pieces } = self.sampling {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(Error::Config(format!("rho must be > 0, got {rho}")));
            }
            if pieces == 0 {
                return Err(Error::Config("piece count must be >= 1".to_owned()));
            }
        }
        if let Balance::Imbalanced { pi, .. } = self.balance {
            if !(pi > 0.0 && pi <= 1.0) {
                return Err(Error::Config(format!("pi must lie in (0, 1], got {pi}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    IsCb,
    DsCb,
    IsCi,
    DsCi,
}

impl ScenarioKind {
    pub fn dependent(self) -> bool {
        matches!(self, ScenarioKind::DsCb | ScenarioKind::DsCi)
    }

    pub fn imbalanced(self) -> bool {
        matches!(self, ScenarioKind::IsCi | ScenarioKind::DsCi)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::IsCb => "is+cb",
            ScenarioKind::DsCb => "ds+cb",
            ScenarioKind::IsCi => "is+ci",
            ScenarioKind::DsCi => "ds+ci",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "is+cb" => Ok(ScenarioKind::IsCb),
            "ds+cb" => Ok(ScenarioKind::DsCb),
            "is+ci" => Ok(ScenarioKind::IsCi),
            "ds+ci" => Ok(ScenarioKind::DsCi),
            other => Err(Error::Parse(format!(
                "unknown scenario `{other}` (expected is+cb, ds+cb, is+ci or ds+ci)"
            ))),
        }
    }
}

/// Uniform random permutation of the dataset.
pub fn order_is(dataset: &LabeledDataset, seed: u64) -> StreamOrder {
    let mut rng = rng::seeded(seed, purpose::ORDER_IS);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng);
    StreamOrder(idx)
}

/// Dirichlet-concentrated ordering over `pieces` pieces.
pub fn order_ds(dataset: &LabeledDataset, rho: f64, pieces: usize, seed: u64) -> Result<StreamOrder> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!("rho must be > 0, got {rho}")));
    }
    if pieces == 0 {
        return Err(Error::Config("piece count must be >= 1".to_owned()));
    }
    let mut rng = rng::seeded(seed, purpose::ORDER_DS);
    let gamma = Gamma::new(rho, 1.0).map_err(|e| Error::Config(format!("gamma({rho}): {e}")))?;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); pieces];
    for k in 0..dataset.classes {
        let mut members = dataset.class_indices(k);
        // The Dirichlet draw happens for every class, present or not, so the random
        // sequence does not depend on which classes are populated.
        let draws: Vec<f64> = (0..pieces).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let q: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|g| g / total).collect()
        } else {
            // Every gamma draw underflowed: the mass sits on the largest draw.
            let mut q = vec![0.0; pieces];
            q[crate::matrix::argmax(&draws)] = 1.0;
            q
        };
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), &q);
        let mut start = 0;
        for (bucket, n) in buckets.iter_mut().zip(counts) {
            bucket.extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    let mut order = Vec::with_capacity(dataset.len());
    for mut bucket in buckets {
        bucket.shuffle(&mut rng);
        order.extend(bucket);
    }
    Ok(StreamOrder(order))
}

/// Splits `total` into integer parts proportional to `shares` (which sum to 1), giving
/// leftover units to the largest fractional parts; ties go to the lower index.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|q| q * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rest: Vec<usize> = (0..shares.len()).collect();
    rest.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in rest.iter().take(total.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    counts
}

/// Target size of each class under exponential imbalance.
pub fn ci_counts(classes: usize, pi: f64, n_max: usize) -> Vec<usize> {
    if classes == 1 {
        return vec![n_max];
    }
    (0..classes)
        .map(|k| (n_max as f64 * pi.powf(k as f64 / (classes - 1) as f64)).round() as usize)
        .collect()
}

/// Indices (ascending) kept by class-imbalanced resampling.
pub fn resample_ci_indices(dataset: &LabeledDataset, pi: f64, n_max: usize, seed: u64) -> Result<Vec<usize>> {
    if !(pi > 0.0 && pi <= 1.0) {
        return Err(Error::Config(format!("pi must lie in (0, 1], got {pi}")));
    }
    let targets = ci_counts(dataset.classes, pi, n_max);
    let mut rng = rng::seeded(seed, purpose::RESAMPLE_CI);
    let mut keep = Vec::new();
    for (k, &n) in targets.iter().enumerate() {
        let mut members = dataset.class_indices(k);
        if members.len() < n {
            return Err(Error::Input(format!(
                "class {k} has {} samples but {n} are needed for pi={pi}, n_max={n_max}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..n]);
    }
    keep.sort_unstable();
    Ok(keep)
}

pub fn resample_ci(dataset: &LabeledDataset, pi: f64, n_max: usize, seed: u64) -> Result<LabeledDataset> {
    Ok(dataset.subset(&resample_ci_indices(dataset, pi, n_max, seed)?))
}

/// An ordered test stream. Labels are carried for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct TestStream {
    /// Index into the original dataset for each position.
    pub sample_index: Vec<usize>,
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl TestStream {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features of positions `start..end`.
    pub fn batch(&self, start: usize, end: usize) -> FeatureMatrix {
        let idx: Vec<usize> = (start..end).collect();
        self.features.select_rows(&idx)
    }
}

pub fn make_scenario(dataset: &LabeledDataset, spec: &ScenarioSpec) -> Result<TestStream> {
    spec.validate()?;
    let base: Vec<usize> = match spec.balance {
        Balance::Balanced => (0..dataset.len()).collect(),
        Balance::Imbalanced { pi, n_max } => {
            let n_max = match n_max {
                Some(n) => n,
                None => dataset.class_counts().into_iter().min().unwrap_or(0),
            };
            resample_ci_indices(dataset, pi, n_max, spec.seed)?
        }
    };
    let pool = dataset.subset(&base);
    let order = match spec.sampling {
        Sampling::Independent => order_is(&pool, spec.seed),
        Sampling::Dependent { rho, pieces } => order_ds(&pool, rho, pieces, spec.seed)?,
    };
    let sample_index: Vec<usize> = order.0.iter().map(|&i| base[i]).collect();
    Ok(TestStream {
        features: dataset.features.select_rows(&sample_index),
        labels: sample_index.iter().map(|&i| dataset.labels[i]).collect(),
        sample_index,
        classes: dataset.classes,
    })
}

/// Mean length of maximal runs of equal consecutive labels.
pub fn mean_run_length(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let runs = 1 + labels.windows(2).filter(|w| w[0] != w[1]).count();
    labels.len() as f64 / runs as f64
}

/// CSV manifest: `position,sample_index,label`.
pub fn write_manifest<W: Write>(stream: &TestStream, mut out: W) -> Result<()> {
    writeln!(out, "position,sample_index,label")?;
    for (pos, (idx, y)) in stream.sample_index.iter().zip(&stream.labels).enumerate() {
        writeln!(out, "{pos},{idx},{y}")?;
    }
    Ok(())
}
