//! Few-shot meta-training with long-term cross adversarial schedules.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`tape`]: dense tensors and a reverse-mode autodiff tape,
//!   generic over `f32` (training) and `f64` (gradient checks).
//! * [`data`] and [`sampler`]: the FSB dataset format, a synthetic dataset
//!   generator and N-way K-shot episode sampling.
//! * [`model`] and [`head`]: the convolutional embedding network and the
//!   ProtoNet / ridge-regression heads fit on each support set.
//! * [`attack`]: L∞ PGD against a task-adapted model.
//! * [`schedule`], [`optim`] and [`train`]: clean/adversarial epoch
//!   schedules and the meta-training loop.
//! * [`eval`]: clean and robust accuracy with confidence intervals.
//! * [`config`] and [`checkpoint`]: run configuration and parameter files.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
mod kernels;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attack::{adversarial_episode, pgd_attack, AttackConfig, AttackObjective, AttackScope, AttackStats};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{generate_synthetic, load_fsb, save_fsb, DatasetStore, Split, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{evaluate, format_metric, pgd_step_sweep, EvalConfig, MetricReport};
pub use head::{fine_tune, HeadConfig, HeadKind, TaskAdaptedModel};
pub use model::{EmbeddingNetConfig, ModelConfig, ModelParams};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use sampler::{sample_batch, sample_episode, Episode, SamplerConfig};
pub use schedule::{phase_of_epoch, Mode, Phase, ScheduleConfig, TradesMode, UpdateGranularity};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
pub use train::{run_training, EpochRecord, TrainConfig, TrainState};
