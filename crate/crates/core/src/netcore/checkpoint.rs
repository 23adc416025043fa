//! Versioned JSON checkpoints.
//!
//! Floats are written as the shortest decimal that parses back to the same `f64`, and
//! parsed with correct rounding, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::harness::TaskSpec;
use crate::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "delta-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub version: u32,
    pub model: ModelState,
    /// Recipe of the synthetic task the model was trained on, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
}

impl Checkpoint {
    pub fn new(model: ModelState, task: Option<TaskSpec>) -> Self {
        Self { schema: CHECKPOINT_SCHEMA.to_owned(), version: CHECKPOINT_VERSION, model, task }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Parse(format!("not a checkpoint (schema `{}`)", ck.schema)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.model.spec.validate()?;
        Ok(ck)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}
