//! L∞ projected gradient descent (FGSM when `steps == 1` without random
//! start) against a task-adapted model.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::TaskAdaptedModel;
use crate::rng::Rng;
use crate::sampler::Episode;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    /// Maximize cross-entropy against the true labels.
    CrossEntropy,
    /// Maximize `KL(f(x_clean) || f(x_adv))`.
    KlToClean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackScope {
    QueryOnly,
    SupportAndQuery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L∞ radius in pixel units.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "zero")]
    pub clip_lo: f64,
    #[serde(default = "one")]
    pub clip_hi: f64,
    #[serde(default = "default_objective")]
    pub objective: AttackObjective,
}

fn zero() -> f64 {
    0.0
}
fn one() -> f64 {
    1.0
}
fn default_objective() -> AttackObjective {
    AttackObjective::CrossEntropy
}

/// Standard deviation of the Gaussian start used by the KL objective, whose
/// gradient vanishes at the clean point.
pub const KL_START_STD: f64 = 1e-3;

impl AttackConfig {
    /// Training attacker: 7 steps of 2/255 inside an 8/255 ball.
    pub fn train_preset() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 7,
            random_start: false,
            clip_lo: 0.0,
            clip_hi: 1.0,
            objective: AttackObjective::CrossEntropy,
        }
    }

    /// Evaluation attacker: 20 steps of 2/255 inside an 8/255 ball.
    pub fn eval_preset() -> Self {
        AttackConfig {
            steps: 20,
            ..Self::train_preset()
        }
    }

    /// Same step/radius ratios as the presets, rescaled to radius `epsilon`.
    pub fn scaled(&self, epsilon: f64) -> Self {
        let ratio = if self.epsilon > 0.0 {
            self.step_size / self.epsilon
        } else {
            0.25
        };
        AttackConfig {
            epsilon,
            step_size: epsilon * ratio,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "attack epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!(
                "attack step_size must be >= 0, got {}",
                self.step_size
            )));
        }
        // With a zero radius every step projects back onto the input.
        if self.steps > 0 && self.epsilon > 0.0 && self.step_size == 0.0 {
            return Err(Error::config(
                "attack step_size must be > 0 when steps > 0 and epsilon > 0",
            ));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::config("attack clip_lo must be < clip_hi"));
        }
        Ok(())
    }
}

/// Attack bookkeeping; counters only grow within a run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackStats {
    /// `adversarial_episode` calls.
    pub invocations: u64,
    pub attacked_images: u64,
    pub support_images: u64,
    pub query_images: u64,
    /// PGD gradient evaluations.
    pub gradient_steps: u64,
}

/// Run PGD on `images` (in `[clip_lo, clip_hi]`) against `adapted`.
///
/// `x0 = x` (+ uniform noise in the ball when `random_start`), then each step
/// moves `step_size · sign(∇ₓ objective)` and projects back onto the
/// intersection of the ε-ball around `x` and the pixel box. The returned
/// tensor carries no gradient history.
pub fn pgd_attack<T: Real>(
    adapted: &TaskAdaptedModel<'_, T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    pgd_attack_counted(adapted, images, labels, cfg, rng).map(|(x, _)| x)
}

/// [`pgd_attack`] that also reports the number of gradient evaluations.
pub fn pgd_attack_counted<T: Real>(
    adapted: &TaskAdaptedModel<'_, T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<(Tensor<T>, u64)> {
    cfg.validate()?;
    let (lo, hi) = (T::of(cfg.clip_lo), T::of(cfg.clip_hi));
    let eps = T::of(cfg.epsilon);
    if let Some(v) = images.data().iter().find(|&&v| !(v >= lo && v <= hi)) {
        return Err(Error::config(format!("attack input {v} outside [{lo}, {hi}]")));
    }
    if cfg.steps == 0 && !cfg.random_start {
        return Ok((images.clone(), 0));
    }

    // Per-coordinate feasible interval: ε-ball ∩ pixel box.
    let lower: Vec<T> = images.data().iter().map(|&v| (v - eps).max(lo)).collect();
    let upper: Vec<T> = images.data().iter().map(|&v| (v + eps).min(hi)).collect();

    let mut x = images.clone();
    if cfg.random_start {
        for v in x.data_mut() {
            *v += T::of(rng.random_range(-cfg.epsilon..=cfg.epsilon));
        }
        project(x.data_mut(), &lower, &upper);
    } else if cfg.objective == AttackObjective::KlToClean && cfg.steps > 0 {
        for v in x.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += T::of(KL_START_STD * z);
        }
        project(x.data_mut(), &lower, &upper);
    }

    let n = images.shape().first().copied().unwrap_or(0);
    if cfg.objective == AttackObjective::CrossEntropy && labels.len() != n {
        return Err(Error::shape(
            "pgd_attack",
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    let clean_logits = match cfg.objective {
        AttackObjective::KlToClean => Some(adapted.logits(images)?),
        AttackObjective::CrossEntropy => None,
    };

    // Both objectives are means of per-image terms, so the sign of each
    // image's gradient does not depend on which other images share the
    // batch. Attacking in small chunks keeps activations cache-resident.
    let inner = x.len().checked_div(n).unwrap_or(0);
    let step = T::of(cfg.step_size);
    for start in (0..n).step_by(PGD_CHUNK) {
        let end = (start + PGD_CHUNK).min(n);
        let span = start * inner..end * inner;
        let mut xc = x.slice_outer(start, end);
        let clean_c = clean_logits.as_ref().map(|c| c.slice_outer(start, end));
        for k in 0..cfg.steps {
            let mut tape = Tape::new();
            let xv = tape.var(xc.clone(), true);
            let logits = adapted.logits_on(&mut tape, xv)?;
            let loss = match &clean_c {
                None => tape.softmax_cross_entropy(logits, &labels[start..end])?,
                Some(clean) => {
                    let c = tape.constant(clean.clone());
                    tape.kl_divergence(c, logits)?
                }
            };
            tape.backward(loss)?;
            let grad = tape.take_grad(xv).unwrap_or_else(|| Tensor::zeros(xc.shape()));
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "PGD gradient at step {k}/{} (loss {})",
                    cfg.steps,
                    tape.value(loss).item()
                )));
            }
            for (v, &g) in xc.data_mut().iter_mut().zip(grad.data()) {
                if g > T::zero() {
                    *v += step;
                } else if g < T::zero() {
                    *v -= step;
                }
            }
            project(xc.data_mut(), &lower[span.clone()], &upper[span.clone()]);
        }
        x.data_mut()[span].copy_from_slice(xc.data());
    }
    Ok((x, cfg.steps as u64))
}

/// Images attacked per forward/backward pass.
const PGD_CHUNK: usize = 16;

fn project<T: Real>(x: &mut [T], lower: &[T], upper: &[T]) {
    for ((v, &l), &u) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.max(l).min(u);
    }
}

/// Build τ′ from τ: attack the scoped image sets of `episode` against
/// `adapted` and keep the labels.
pub fn adversarial_episode<T: Real>(
    adapted: &TaskAdaptedModel<'_, T>,
    episode: &Episode<T>,
    cfg: &AttackConfig,
    scope: AttackScope,
    rng: &mut Rng,
    stats: &mut AttackStats,
) -> Result<Episode<T>> {
    let mut out = episode.clone();
    let (q, qsteps) = pgd_attack_counted(adapted, &episode.query_images, &episode.query_labels, cfg, rng)?;
    out.query_images = q;
    let mut steps = qsteps;
    let nq = episode.query_labels.len() as u64;
    let mut ns = 0;
    if scope == AttackScope::SupportAndQuery {
        let (s, ssteps) = pgd_attack_counted(adapted, &episode.support_images, &episode.support_labels, cfg, rng)?;
        out.support_images = s;
        steps += ssteps;
        ns = episode.support_labels.len() as u64;
    }
    stats.invocations += 1;
    stats.query_images += nq;
    stats.support_images += ns;
    stats.attacked_images += nq + ns;
    stats.gradient_steps += steps;
    Ok(out)
}
