//! Named adaptation methods.
//!
//! A method name is a base followed by `+`-separated components and an optional
//! `:soft` suffix:
//!
//! ```text
//! base       := source | bn-adapt | tema | pl | tent | ent-w
//! component  := tbr | tema | dot | delta | la | sample-drop
//! ```
//!
//! `delta` is shorthand for `tbr+dot`. Gradient-based bases (`pl`, `tent`, `ent-w`)
//! normalize with batch statistics unless `tbr` (or the `tema` negative control) is
//! given. `:soft` switches re-weighting to soft probabilities.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::dot::{DotVariant, DEFAULT_LAMBDA};
use super::loss::{LossKind, LossSpec, DEFAULT_ENTW_FACTOR, DEFAULT_PL_THRESHOLD};
use crate::netcore::OptimizerConfig;
use crate::normalize::{InitStrategy, NormMode, DEFAULT_ALPHA};
use crate::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Strategy {
    #[default]
    None,
    /// Logit adjustment with the tracked class-frequency estimate.
    LogitAdjust { tau: f64 },
    /// Exclude samples whose pseudo class is above the mean usage count.
    SampleDrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub norm: NormMode,
    /// `None` for methods that never update parameters.
    pub loss: Option<LossSpec>,
    pub dot: Option<DotVariant>,
    pub strategy: Strategy,
    /// Test-time EMA coefficient.
    pub alpha: f64,
    /// Class-frequency momentum.
    pub lambda: f64,
    pub optimizer: OptimizerConfig,
    pub init: InitStrategy,
    /// Back-propagate through pure test-time EMA normalization. Only the `tent+tema`
    /// negative control sets this.
    pub ema_gradients: bool,
}

impl MethodSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let lower = name.trim().to_ascii_lowercase();
        let (body, soft) = match lower.strip_suffix(":soft") {
            Some(b) => (b, true),
            None => (lower.as_str(), false),
        };
        let mut parts = body.split('+');
        let base = parts.next().unwrap_or_default();

        let (mut norm, loss) = match base {
            "source" => (NormMode::SourceEma, None),
            "bn-adapt" => (NormMode::BatchStat, None),
            "tema" => (NormMode::TestEma, None),
            "pl" => (NormMode::BatchStat, Some(LossSpec::pseudo_label(DEFAULT_PL_THRESHOLD))),
            "tent" => (NormMode::BatchStat, Some(LossSpec::entropy())),
            "ent-w" => (NormMode::BatchStat, Some(LossSpec::entw(DEFAULT_ENTW_FACTOR))),
            other => return Err(unknown(name, other)),
        };
        let mut dot = None;
        let mut strategy = Strategy::None;
        let mut ema_gradients = false;
        for part in parts {
            match part {
                "tbr" | "tema" | "delta" if base == "source" => {
                    return Err(Error::Config(format!("`{name}`: source inference has no test-time statistics")))
                }
                "tbr" => norm = if loss.is_some() { NormMode::Tbr } else { NormMode::TestEma },
                "tema" => {
                    norm = NormMode::TestEma;
                    ema_gradients = loss.is_some();
                }
                "dot" => dot = Some(DotVariant::Hard),
                "delta" => {
                    norm = if loss.is_some() { NormMode::Tbr } else { NormMode::TestEma };
                    dot = Some(DotVariant::Hard);
                }
                "la" => strategy = Strategy::LogitAdjust { tau: 1.0 },
                "sample-drop" => strategy = Strategy::SampleDrop,
                other => return Err(unknown(name, other)),
            }
        }
        if soft {
            match dot.as_mut() {
                Some(v) => *v = DotVariant::Soft,
                None => return Err(Error::Config(format!("`{name}`: `:soft` needs re-weighting (dot/delta)"))),
            }
        }
        let spec = Self {
            name: lower.clone(),
            norm,
            loss,
            dot,
            strategy,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            optimizer: OptimizerConfig::adam(DEFAULT_LR),
            init: InitStrategy::First,
            ema_gradients,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dot.is_some() && self.loss.is_none() {
            return Err(Error::Config(format!("`{}`: re-weighting needs a gradient-based loss", self.name)));
        }
        if self.loss.is_some() && !self.norm.supports_gradients() && !(self.ema_gradients && self.norm == NormMode::TestEma) {
            return Err(Error::Config(format!(
                "`{}`: gradient adaptation needs batch-stat or tbr normalization",
                self.name
            )));
        }
        if !matches!(self.strategy, Strategy::None) && self.loss.is_none() {
            return Err(Error::Config(format!("`{}`: la / sample-drop need a gradient-based loss", self.name)));
        }
        if let Some(l) = &self.loss {
            l.validate()?;
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if self.optimizer.lr().is_nan() || self.optimizer.lr() < 0.0 {
            return Err(Error::Config("learning rate must be >= 0".to_owned()));
        }
        Ok(())
    }

    pub fn adapts(&self) -> bool {
        self.loss.is_some()
    }

    /// Whether the class-frequency estimate is maintained.
    pub fn tracks_z(&self) -> bool {
        self.dot.is_some() || !matches!(self.strategy, Strategy::None)
    }

    pub fn loss_kind(&self) -> Option<LossKind> {
        self.loss.map(|l| l.kind)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerConfig) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn with_init(mut self, init: InitStrategy) -> Self {
        self.init = init;
        self
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

fn unknown(name: &str, part: &str) -> Error {
    Error::Parse(format!("unknown method component `{part}` in `{name}`"))
}
