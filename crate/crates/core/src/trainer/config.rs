use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{LatentKind, ModelDims};
use crate::error::{Error, Result};
use crate::sim::episode::DatasetConfig;
use crate::tensor::AdamWConfig;
use crate::world_model::WorldModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    PerceptionFree,
    PerceptionBased,
}

impl Framework {
    pub fn latent_kind(self) -> LatentKind {
        match self {
            Framework::PerceptionFree => LatentKind::Perspective,
            Framework::PerceptionBased => LatentKind::Bev,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        OptimizerConfig {
            lr: 1e-3,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Epoch counts per stage. Stage 1 exists for the perception-based
/// framework (perception losses only) and for two-frame history (trained
/// single-frame first); otherwise it must be zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub cosine: bool,
    /// Cap on training samples per epoch, 0 for all.
    #[serde(default)]
    pub max_train_frames: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            stage1_epochs: 0,
            stage2_epochs: 5,
            batch_size: 16,
            cosine: true,
            max_train_frames: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub framework: Framework,
    pub world_model: WorldModelConfig,
    pub model: ModelDims,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Dataset file used by `train` when no path is given on the command line.
    #[serde(default)]
    pub dataset_path: Option<String>,
    /// How to generate data in memory (ablations) or via `gen-data`.
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            framework: Framework::PerceptionFree,
            world_model: WorldModelConfig::default(),
            model: ModelDims::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            seed: 0,
            dataset_path: None,
            dataset: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.world_model.validate()?;
        let s = &self.schedule;
        if s.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if s.stage2_epochs == 0 {
            return Err(Error::Config("stage2_epochs must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.has_stage1() != (s.stage1_epochs > 0) {
            return Err(Error::Config(if self.has_stage1() {
                "this configuration trains in two stages; stage1_epochs must be positive".into()
            } else {
                "single-stage configuration with stage1_epochs > 0".into()
            }));
        }
        if let Some(d) = &self.dataset {
            d.validate()?;
        }
        Ok(())
    }

    pub fn has_stage1(&self) -> bool {
        self.framework == Framework::PerceptionBased
            || (self.world_model.enabled && self.world_model.history_frames == 2)
    }

    /// Canonical JSON text: fields in declaration order, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
