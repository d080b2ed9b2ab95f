//! Meta-training: clean and adversarial meta-updates, the TRADES loss, and
//! the epoch loop that follows a [`ScheduleConfig`].
//!
//! Per task, the head is fit on the support set and the query loss is
//! differentiated with respect to θ through that fit. Task gradients are
//! summed in task order; the optimizer consumes
//!
//! * `per_term`: `Σ_batch g / n` after every meta-batch;
//! * `per_block`: the sum over a whole same-phase block of epochs, divided by
//!   `n` for SGD (so one step is exactly `θ -= λ/n ΣΣ g`) or by the number of
//!   tasks for Adam.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{adversarial_episode, AttackConfig, AttackObjective, AttackStats};
use crate::data::DatasetStore;
use crate::error::{Error, Result};
use crate::head::fine_tune_episode;
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{OptimizerConfig, OptimizerKind, OptimizerState};
use crate::rng::{self, Rng};
use crate::sampler::{sample_batch, Episode, SamplerConfig};
use crate::schedule::{phase_of_epoch, Phase, ScheduleConfig, UpdateGranularity};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    /// Record elapsed milliseconds in the epoch log. Off by default so that
    /// identical runs produce identical logs.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.model.validate()?;
        self.attack.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()
    }

    /// Attack used in adversarial epochs; TRADES switches to the KL objective.
    pub fn adv_attack(&self) -> AttackConfig {
        let mut a = self.attack.clone();
        if self.schedule.trades_in_adv_phase() {
            a.objective = AttackObjective::KlToClean;
        }
        a
    }
}

/// One line of the JSON-lines metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    pub adv_batches_cum: u64,
    pub adv_images_cum: u64,
    pub wall_ms: u64,
}

/// Running sum of task gradients awaiting an optimizer step.
#[derive(Clone, Debug)]
pub struct GradAccumulator<T: Real> {
    pub sum: Vec<Tensor<T>>,
    pub tasks: usize,
}

impl<T: Real> GradAccumulator<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        GradAccumulator {
            sum: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            tasks: 0,
        }
    }

    fn add(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        for (acc, g) in self.sum.iter_mut().zip(grads) {
            acc.add_assign(g)?;
        }
        self.tasks += 1;
        Ok(())
    }

    fn reset(&mut self) {
        for t in &mut self.sum {
            t.data_mut().fill(T::zero());
        }
        self.tasks = 0;
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T: Real = f32> {
    pub epoch: usize,
    pub phase: Phase,
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    pub stats: AttackStats,
    pub rng: Rng,
    pub log: Vec<EpochRecord>,
    /// Adversarial meta-batches processed.
    pub adv_batches: u64,
    pub pending: GradAccumulator<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig, params: ModelParams<T>, rng: Rng) -> Self {
        TrainState {
            epoch: 0,
            phase: phase_of_epoch(0, &cfg.schedule),
            optimizer: OptimizerState::new(cfg.optimizer.clone(), &params),
            pending: GradAccumulator::new(&params),
            params,
            stats: AttackStats::default(),
            rng,
            log: Vec::new(),
            adv_batches: 0,
        }
    }
}

/// `CE(clean, y) + β · KL(softmax(clean) || softmax(adv))`.
pub fn trades_loss<T: Real>(
    tape: &mut Tape<T>,
    clean_logits: Var,
    adv_logits: Var,
    labels: &[usize],
    beta: f64,
) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::config(format!("TRADES beta must be >= 0, got {beta}")));
    }
    let ce = tape.softmax_cross_entropy(clean_logits, labels)?;
    let kl = tape.kl_divergence(clean_logits, adv_logits)?;
    let weighted = tape.scale(kl, T::of(beta));
    tape.add(ce, weighted)
}

/// Query cross-entropy of one clean task and its gradient w.r.t. θ.
pub fn clean_task_grads<T: Real>(
    model: &ModelConfig,
    params: &ModelParams<T>,
    episode: &Episode<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let s = tape.constant(episode.support_images.clone());
    let state = model.fine_tune_on(&mut tape, &bound, s, &episode.support_labels, episode.way)?;
    let q = tape.constant(episode.query_images.clone());
    let logits = model.head_logits_on(&mut tape, &bound, state, q)?;
    let loss = tape.softmax_cross_entropy(logits, &episode.query_labels)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item().to_f64(), params.collect_grads(&tape, &bound)))
}

/// Loss on an adversarial task `adv` (support possibly attacked). With
/// `trades_beta`, the clean queries of `clean` enter the TRADES composite.
pub fn adversarial_task_grads<T: Real>(
    model: &ModelConfig,
    params: &ModelParams<T>,
    clean: &Episode<T>,
    adv: &Episode<T>,
    trades_beta: Option<f64>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let s = tape.constant(adv.support_images.clone());
    let state = model.fine_tune_on(&mut tape, &bound, s, &adv.support_labels, adv.way)?;
    let q = tape.constant(adv.query_images.clone());
    let adv_logits = model.head_logits_on(&mut tape, &bound, state, q)?;
    let loss = match trades_beta {
        None => tape.softmax_cross_entropy(adv_logits, &adv.query_labels)?,
        Some(beta) => {
            let cq = tape.constant(clean.query_images.clone());
            let clean_logits = model.head_logits_on(&mut tape, &bound, state, cq)?;
            trades_loss(&mut tape, clean_logits, adv_logits, &clean.query_labels, beta)?
        }
    };
    tape.backward(loss)?;
    Ok((tape.value(loss).item().to_f64(), params.collect_grads(&tape, &bound)))
}

fn check_loss(loss: f64, epoch: usize, task: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} at epoch {epoch}, task {task} of the meta-batch"
        )));
    }
    Ok(())
}

/// Clean meta-update contribution of one batch. Returns the summed task loss.
pub fn clean_meta_step<T: Real>(state: &mut TrainState<T>, cfg: &TrainConfig, batch: &[Episode<T>]) -> Result<f64> {
    let mut total = 0.0;
    for (i, ep) in batch.iter().enumerate() {
        let (loss, grads) = clean_task_grads(&cfg.model, &state.params, ep)?;
        check_loss(loss, state.epoch, i)?;
        state.pending.add(&grads)?;
        total += loss;
    }
    finish_batch(state, cfg)?;
    Ok(total)
}

/// Adversarial meta-update contribution of one batch: adapt on the clean
/// support, attack the scoped images, re-fit on the (possibly attacked)
/// support and differentiate the adversarial query loss.
pub fn adversarial_meta_step<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    batch: &[Episode<T>],
) -> Result<f64> {
    let attack = cfg.adv_attack();
    let scope = cfg.schedule.scope();
    let beta = cfg.schedule.trades_in_adv_phase().then_some(cfg.schedule.trades_beta);
    let mut total = 0.0;
    for (i, ep) in batch.iter().enumerate() {
        let adv = {
            let adapted = fine_tune_episode(&cfg.model, &state.params, ep)?;
            adversarial_episode(&adapted, ep, &attack, scope, &mut state.rng, &mut state.stats)?
        };
        let (loss, grads) = adversarial_task_grads(&cfg.model, &state.params, ep, &adv, beta)?;
        check_loss(loss, state.epoch, i)?;
        state.pending.add(&grads)?;
        total += loss;
    }
    state.adv_batches += 1;
    finish_batch(state, cfg)?;
    Ok(total)
}

fn finish_batch<T: Real>(state: &mut TrainState<T>, cfg: &TrainConfig) -> Result<()> {
    if cfg.schedule.granularity == UpdateGranularity::PerTerm {
        apply_pending(state, cfg)?;
    }
    Ok(())
}

/// Apply the accumulated gradient (if any) and clear it.
pub fn apply_pending<T: Real>(state: &mut TrainState<T>, cfg: &TrainConfig) -> Result<()> {
    if state.pending.tasks == 0 {
        return Ok(());
    }
    let divisor = match (cfg.schedule.granularity, cfg.optimizer.kind) {
        (UpdateGranularity::PerTerm, _) | (UpdateGranularity::PerBlock, OptimizerKind::Sgd) => cfg.schedule.batch_size,
        (UpdateGranularity::PerBlock, OptimizerKind::Adam) => state.pending.tasks,
    };
    let inv = T::of(1.0 / divisor as f64);
    let grads: Vec<Tensor<T>> = state.pending.sum.iter().map(|g| g.map(|v| v * inv)).collect();
    state.optimizer.step(&mut state.params, &grads)?;
    state.pending.reset();
    Ok(())
}

/// Hook called after every epoch, e.g. to stream the metric log to disk.
pub trait TrainObserver<T: Real> {
    fn on_epoch(&mut self, state: &TrainState<T>, record: &EpochRecord) -> Result<()>;
}

impl<T: Real> TrainObserver<T> for () {
    fn on_epoch(&mut self, _: &TrainState<T>, _: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl<T: Real, F: FnMut(&TrainState<T>, &EpochRecord) -> Result<()>> TrainObserver<T> for F {
    fn on_epoch(&mut self, state: &TrainState<T>, record: &EpochRecord) -> Result<()> {
        self(state, record)
    }
}

/// Initial state for `seed`: parameters are drawn first, then the same
/// stream drives episode sampling and attack randomness.
pub fn init_state<T: Real>(cfg: &TrainConfig, seed: u64) -> Result<TrainState<T>> {
    cfg.validate()?;
    let mut rng = rng::seeded(seed);
    let params = cfg.model.init_params(&mut rng)?.cast::<T>();
    Ok(TrainState::new(cfg, params, rng))
}

/// Run one epoch of the schedule on `state`.
pub fn run_epoch<T: Real>(state: &mut TrainState<T>, cfg: &TrainConfig, dataset: &DatasetStore) -> Result<EpochRecord> {
    let started = Instant::now();
    let phase = phase_of_epoch(state.epoch, &cfg.schedule);
    state.phase = phase;
    let mut loss_sum = 0.0;
    let mut tasks = 0usize;
    for _ in 0..cfg.schedule.meta_batches_per_epoch {
        let batch: Vec<Episode<T>> = sample_batch(dataset, &cfg.sampler, cfg.schedule.batch_size, &mut state.rng)?
            .iter()
            .map(Episode::cast)
            .collect();
        loss_sum += match phase {
            Phase::Clean => clean_meta_step(state, cfg, &batch)?,
            Phase::Adv => adversarial_meta_step(state, cfg, &batch)?,
        };
        tasks += batch.len();
    }
    if cfg.schedule.granularity == UpdateGranularity::PerBlock && cfg.schedule.ends_block(state.epoch) {
        apply_pending(state, cfg)?;
    }
    let record = EpochRecord {
        epoch: state.epoch,
        phase,
        mean_loss: if tasks > 0 { loss_sum / tasks as f64 } else { 0.0 },
        adv_batches_cum: state.adv_batches,
        adv_images_cum: state.stats.attacked_images,
        wall_ms: if cfg.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    };
    state.log.push(record.clone());
    state.epoch += 1;
    Ok(record)
}

/// Full schedule: `schedule.epochs` epochs from the seeded initial state.
pub fn run_training<T: Real>(
    dataset: &DatasetStore,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut impl TrainObserver<T>,
) -> Result<TrainState<T>> {
    let mut state = init_state::<T>(cfg, seed)?;
    let [c, h, w] = dataset.image_dims();
    let net = &cfg.model.net;
    if (net.in_channels, net.height, net.width) != (c, h, w) {
        return Err(Error::config(format!(
            "model expects {}x{}x{} images, dataset has {c}x{h}x{w}",
            net.in_channels, net.height, net.width
        )));
    }
    while state.epoch < cfg.schedule.epochs {
        let record = run_epoch(&mut state, cfg, dataset)?;
        observer.on_epoch(&state, &record)?;
    }
    Ok(state)
}
