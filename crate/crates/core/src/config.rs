//! Run configuration: every hyperparameter of one experiment, as strict JSON.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::head::HeadConfig;
use crate::model::{EmbeddingNetConfig, ModelConfig};
use crate::optim::OptimizerConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::{ScheduleConfig, UpdateGranularity};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// FSB dataset file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub way: usize,
    pub shot: usize,
    /// Query images per class during training.
    #[serde(default = "default_query")]
    pub query: usize,
}

fn default_query() -> usize {
    15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    /// Query images per class during evaluation.
    #[serde(default = "default_query")]
    pub query: usize,
    #[serde(default = "default_z")]
    pub z: f64,
}

fn default_z() -> f64 {
    1.96
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train_attack: AttackConfig,
    pub eval_attack: AttackConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalSection,
    pub seed: u64,
    #[serde(default)]
    pub record_wall_time: bool,
}

/// Attack radius of the desk presets, in pixel units, for the default
/// synthetic dataset (noise 0.35). At this radius a naturally trained model
/// loses over 40 points of accuracy under the 20-step evaluation attack.
pub const DESK_EPSILON: f64 = 0.05;

impl RunConfig {
    /// Laptop-scale experiment on the default synthetic dataset: 5-way 1-shot,
    /// ProtoNet head, 50 epochs of 20 meta-batches, per-term Adam updates.
    pub fn desk() -> Self {
        RunConfig {
            data: DataConfig {
                path: None,
                way: 5,
                shot: 1,
                query: 5,
            },
            model: ModelConfig {
                net: EmbeddingNetConfig::desk(1, 16, 16),
                head: HeadConfig::proto(),
            },
            train_attack: AttackConfig::train_preset().scaled(DESK_EPSILON),
            eval_attack: AttackConfig::eval_preset().scaled(DESK_EPSILON),
            schedule: ScheduleConfig {
                meta_batches_per_epoch: 20,
                batch_size: 4,
                granularity: UpdateGranularity::PerTerm,
                ..ScheduleConfig::lcat(50)
            },
            optimizer: OptimizerConfig::adam(0.003),
            // Five queries per class keep 2,000 attacked episodes affordable.
            eval: EvalSection {
                episodes: 2000,
                query: 5,
                z: default_z(),
            },
            seed: 0,
            record_wall_time: false,
        }
    }

    /// Full-scale hyperparameters: 8-task meta-batches, 100 per epoch,
    /// Adam at lr 0.1, per-block updates, image-scale attack presets.
    pub fn full() -> Self {
        RunConfig {
            data: DataConfig {
                path: None,
                way: 5,
                shot: 1,
                query: 15,
            },
            train_attack: AttackConfig::train_preset(),
            eval_attack: AttackConfig::eval_preset(),
            schedule: ScheduleConfig::lcat(50),
            optimizer: OptimizerConfig::adam(0.1),
            eval: EvalSection {
                episodes: 2000,
                query: 15,
                z: default_z(),
            },
            ..Self::desk()
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::config(format!(
                "unknown base config {other:?}; valid: desk, full"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sampler: SamplerConfig::new(self.data.way, self.data.shot, self.data.query, Split::Train),
            model: self.model.clone(),
            attack: self.train_attack.clone(),
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.clone(),
            record_wall_time: self.record_wall_time,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            episodes: self.eval.episodes,
            sampler: SamplerConfig::new(self.data.way, self.data.shot, self.eval.query, Split::Test),
            attack: self.eval_attack.clone(),
            seed: self.seed,
            z: self.eval.z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.eval_config().validate()
    }
}
