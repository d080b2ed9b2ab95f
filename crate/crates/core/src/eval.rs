//! Clean and robust accuracy over test episodes.
//!
//! Episode `i` draws everything (classes, images, attack noise) from
//! `rng::stream(seed, i)`, so two models evaluated with the same seed see the
//! same episodes.

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackConfig};
use crate::data::{DatasetStore, Split};
use crate::error::{Error, Result};
use crate::head::fine_tune_episode;
use crate::model::{ModelConfig, ModelParams};
use crate::rng::{self, Rng};
use crate::sampler::{sample_episode, Episode, SamplerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub sampler: SamplerConfig,
    pub attack: AttackConfig,
    pub seed: u64,
    /// Normal quantile of the reported interval.
    #[serde(default = "default_z")]
    pub z: f64,
}

fn default_z() -> f64 {
    1.96
}

impl EvalConfig {
    /// 2,000 test episodes of 5-way 1-shot against the 20-step attacker.
    pub fn desk() -> Self {
        EvalConfig {
            episodes: 2000,
            sampler: SamplerConfig::new(5, 1, 15, Split::Test),
            attack: AttackConfig::eval_preset(),
            seed: 0,
            z: default_z(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::config("evaluation needs at least one episode"));
        }
        if !(self.z >= 0.0 && self.z.is_finite()) {
            return Err(Error::config(format!("z must be >= 0, got {}", self.z)));
        }
        self.sampler.validate()?;
        self.attack.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: EvalConfig,
    pub acc_nat: f64,
    pub ci_nat: f64,
    pub acc_adv: f64,
    pub ci_adv: f64,
    pub episodes: usize,
    pub adv_eval_steps: usize,
}

impl MetricReport {
    /// `"nat MM.MM % (H.HH %)  adv MM.MM % (H.HH %)"`.
    pub fn table_line(&self) -> String {
        format!(
            "nat {}  adv {}",
            format_metric(self.acc_nat, self.ci_nat),
            format_metric(self.acc_adv, self.ci_adv)
        )
    }
}

/// Mean and `z · s / √n` with the sample standard deviation `s` (n − 1).
pub fn confidence_interval_z(values: &[f64], z: f64) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "confidence interval needs at least 2 values, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, z * var.sqrt() / (n as f64).sqrt()))
}

/// 95% normal interval, see [`confidence_interval_z`].
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    confidence_interval_z(values, default_z())
}

/// Table-cell style, e.g. `32.55 % (0.49 %)`.
pub fn format_metric(mean: f64, half_width: f64) -> String {
    format!("{:.2} % ({:.2} %)", mean * 100.0, half_width * 100.0)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Clean and attacked query accuracy on one episode. `rng` supplies the
/// attack's randomness.
pub fn score_episode(
    model: &ModelConfig,
    params: &ModelParams,
    episode: &Episode,
    attack: &AttackConfig,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let adapted = fine_tune_episode(model, params, episode)?;
    let clean = accuracy(&adapted.predict(&episode.query_images)?, &episode.query_labels);
    let x_adv = pgd_attack(&adapted, &episode.query_images, &episode.query_labels, attack, rng)?;
    let adv = accuracy(&adapted.predict(&x_adv)?, &episode.query_labels);
    Ok((clean, adv))
}

/// Episode `i` of the evaluation set and the stream positioned after it.
pub fn eval_episode(dataset: &DatasetStore, cfg: &EvalConfig, i: usize) -> Result<(Episode, Rng)> {
    let mut rng = rng::stream(cfg.seed, i as u64);
    let ep = sample_episode(dataset, &cfg.sampler, &mut rng)?;
    Ok((ep, rng))
}

fn check_model(model: &ModelConfig, dataset: &DatasetStore) -> Result<()> {
    let net = &model.net;
    let [c, h, w] = dataset.image_dims();
    if (net.in_channels, net.height, net.width) != (c, h, w) {
        return Err(Error::config(format!(
            "model expects {}x{}x{} images, dataset has {c}x{h}x{w}",
            net.in_channels, net.height, net.width
        )));
    }
    Ok(())
}

pub fn evaluate(
    model: &ModelConfig,
    params: &ModelParams,
    dataset: &DatasetStore,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    check_model(model, dataset)?;
    if dataset.classes_in(cfg.sampler.split).is_empty() {
        return Err(Error::InsufficientData(format!(
            "{:?} split is empty",
            cfg.sampler.split
        )));
    }
    let mut nat = Vec::with_capacity(cfg.episodes);
    let mut adv = Vec::with_capacity(cfg.episodes);
    for i in 0..cfg.episodes {
        let (ep, mut rng) = eval_episode(dataset, cfg, i)?;
        let (c, a) = score_episode(model, params, &ep, &cfg.attack, &mut rng)?;
        nat.push(c);
        adv.push(a);
    }
    let (acc_nat, ci_nat) = summarize(&nat, cfg.z)?;
    let (acc_adv, ci_adv) = summarize(&adv, cfg.z)?;
    Ok(MetricReport {
        config: cfg.clone(),
        acc_nat,
        ci_nat,
        acc_adv,
        ci_adv,
        episodes: cfg.episodes,
        adv_eval_steps: cfg.attack.steps,
    })
}

// A single episode has no spread estimate; report it with zero width rather
// than failing a one-episode smoke evaluation.
fn summarize(values: &[f64], z: f64) -> Result<(f64, f64)> {
    match values {
        [v] => Ok((*v, 0.0)),
        _ => confidence_interval_z(values, z),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub acc_adv: f64,
    pub ci_adv: f64,
}

/// Robust accuracy for each step budget on one frozen episode set. Each
/// budget restarts episode `i`'s attack from the same stream position, so
/// the `cfg.attack.steps` row equals [`evaluate`]'s `acc_adv`.
pub fn pgd_step_sweep(
    model: &ModelConfig,
    params: &ModelParams,
    dataset: &DatasetStore,
    steps_list: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    if steps_list.is_empty() {
        return Err(Error::config("step sweep needs at least one step count"));
    }
    cfg.validate()?;
    check_model(model, dataset)?;
    let episodes = (0..cfg.episodes)
        .map(|i| eval_episode(dataset, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(steps_list.len());
    for &steps in steps_list {
        let attack = AttackConfig {
            steps,
            ..cfg.attack.clone()
        };
        let mut accs = Vec::with_capacity(episodes.len());
        for (ep, rng) in &episodes {
            let (_, a) = score_episode(model, params, ep, &attack, &mut rng.clone())?;
            accs.push(a);
        }
        let (acc_adv, ci_adv) = summarize(&accs, cfg.z)?;
        rows.push(SweepRow { steps, acc_adv, ci_adv });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("steps,acc_adv,ci_adv\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.steps, r.acc_adv, r.ci_adv));
    }
    out
}
