//! TOML run configuration covering data, model, optimizer and schedule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::DEFAULT_MARGIN;
use crate::model::{AdamConfig, LrSchedule, ModelConfig};
use crate::synth::SynthSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Clips per identity.
    pub k: usize,
    pub margin: f64,
    /// Squared instead of plain Euclidean distance in the triplet loss.
    pub squared: bool,
    pub train_fraction: f64,
    /// Optimizer steps per epoch; 0 means `⌈train clips / (P·K)⌉`.
    pub steps_per_epoch: usize,
    /// Evaluate every n epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    /// Clips per evaluation forward.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            p: 4,
            k: 4,
            margin: DEFAULT_MARGIN,
            squared: false,
            train_fraction: 0.5,
            steps_per_epoch: 0,
            eval_every: 1,
            eval_chunk: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: SynthSpec,
    /// `num_ids` is overwritten with the number of training identities.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub optim: AdamConfig,
    pub schedule: LrSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: SynthSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            optim: AdamConfig::default(),
            schedule: LrSchedule::default(),
        }
    }
}

impl RunConfig {
    /// Full-length schedule: 800 epochs with decay at 200 and 400, P = 8,
    /// and a 1024-wide embedding.
    pub fn full_preset() -> Self {
        let mut c = Self::default();
        c.train.epochs = 800;
        c.train.p = 8;
        c.schedule.milestones = vec![200, 400];
        c.model.dv = 1024;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        let t = &self.train;
        if t.p < 2 || t.k < 2 {
            return Err(Error::Config(format!("P = {} and K = {} must both be ≥ 2 for batch-hard mining", t.p, t.k)));
        }
        if !(t.margin >= 0.0) {
            return Err(Error::Config(format!("margin {} must be non-negative", t.margin)));
        }
        if t.eval_every == 0 || t.eval_chunk == 0 {
            return Err(Error::Config("eval_every and eval_chunk must be positive".into()));
        }
        if self.model.input != self.data.image {
            return Err(Error::Config(format!("model input {:?} differs from data image {:?}", self.model.input, self.data.image)));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.optim.lr)));
        }
        Ok(())
    }
}
