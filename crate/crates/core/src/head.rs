//! Few-shot heads: the episodic fine-tuning step that turns base parameters
//! and a labelled support set into a task classifier.
//!
//! * `proto`: class prototypes are mean support embeddings; logits are
//!   negative squared Euclidean distances.
//! * `ridge`: dual-form ridge regression onto one-hot targets,
//!   `W = Xᵀ (X Xᵀ + λ I)⁻¹ Y`, logits `γ · Q W`.
//!
//! Both are differentiable with respect to the embedding network, so query
//! losses back-propagate through the adaptation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelConfig, ModelParams};
use crate::sampler::Episode;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Proto,
    Ridge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Ridge regularizer; must be positive.
    #[serde(default = "one")]
    pub ridge_lambda: f64,
    /// Logit scale γ for the ridge head (initial value when learned).
    #[serde(default = "one")]
    pub ridge_scale: f64,
    #[serde(default)]
    pub learn_scale: bool,
}

fn one() -> f64 {
    1.0
}

impl HeadConfig {
    pub fn proto() -> Self {
        HeadConfig {
            kind: HeadKind::Proto,
            ridge_lambda: 1.0,
            ridge_scale: 1.0,
            learn_scale: false,
        }
    }

    pub fn ridge() -> Self {
        HeadConfig {
            kind: HeadKind::Ridge,
            ..Self::proto()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_lambda > 0.0) {
            return Err(Error::config(format!(
                "ridge_lambda must be > 0, got {}",
                self.ridge_lambda
            )));
        }
        if !self.ridge_scale.is_finite() {
            return Err(Error::config("ridge_scale must be finite"));
        }
        if self.learn_scale && self.kind != HeadKind::Ridge {
            return Err(Error::config("learn_scale only applies to the ridge head"));
        }
        Ok(())
    }
}

/// Task-specific head state living on a tape.
#[derive(Clone, Copy, Debug)]
pub enum HeadState {
    /// `[way, D]`
    Prototypes(Var),
    /// `[D, way]`
    RidgeWeights(Var),
}

/// `[way, S]` matrix averaging support rows per class.
fn class_mean_matrix<T: Real>(labels: &[usize], way: usize) -> Result<Tensor<T>> {
    let mut counts = vec![0usize; way];
    for &l in labels {
        if l >= way {
            return Err(Error::LabelOutOfRange { label: l, classes: way });
        }
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!("class {k} has no support examples")));
    }
    let s = labels.len();
    let mut m = Tensor::zeros(&[way, s]);
    for (i, &l) in labels.iter().enumerate() {
        m.data_mut()[l * s + i] = T::of(1.0 / counts[l] as f64);
    }
    Ok(m)
}

fn one_hot<T: Real>(labels: &[usize], way: usize) -> Tensor<T> {
    let mut y = Tensor::zeros(&[labels.len(), way]);
    for (i, &l) in labels.iter().enumerate() {
        y.data_mut()[i * way + l] = T::one();
    }
    y
}

/// Differentiable head fit on support embeddings `[S, D]`.
pub fn fit_head<T: Real>(
    tape: &mut Tape<T>,
    head: &HeadConfig,
    support_embeddings: Var,
    labels: &[usize],
    way: usize,
) -> Result<HeadState> {
    head.validate()?;
    let s = tape.shape(support_embeddings).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "fit_head",
            format!("embeddings {s:?} for {} labels", labels.len()),
        ));
    }
    match head.kind {
        HeadKind::Proto => {
            let avg = tape.constant(class_mean_matrix(labels, way)?);
            Ok(HeadState::Prototypes(tape.matmul(avg, support_embeddings)?))
        }
        HeadKind::Ridge => {
            class_mean_matrix::<T>(labels, way)?;
            let n = s[0];
            let xt = tape.transpose(support_embeddings)?;
            let gram = tape.matmul(support_embeddings, xt)?;
            let reg = tape.constant(Tensor::<T>::eye(n).map(|v| v * T::of(head.ridge_lambda)));
            let system = tape.add(gram, reg)?;
            let y = tape.constant(one_hot(labels, way));
            let alpha = tape.solve(system, y)?;
            Ok(HeadState::RidgeWeights(tape.matmul(xt, alpha)?))
        }
    }
}

/// Logits `[B, way]` for query embeddings `[B, D]`.
pub fn logits_from_embeddings<T: Real>(
    tape: &mut Tape<T>,
    head: &HeadConfig,
    state: HeadState,
    scale: Option<Var>,
    query_embeddings: Var,
) -> Result<Var> {
    match state {
        HeadState::Prototypes(c) => tape.neg_sq_dist(query_embeddings, c),
        HeadState::RidgeWeights(w) => {
            let raw = tape.matmul(query_embeddings, w)?;
            match scale {
                Some(g) => tape.scale_by(raw, g),
                None if head.ridge_scale == 1.0 => Ok(raw),
                None => Ok(tape.scale(raw, T::of(head.ridge_scale))),
            }
        }
    }
}

impl ModelConfig {
    /// Differentiable adaptation on a support set already on the tape.
    pub fn fine_tune_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        support_images: Var,
        support_labels: &[usize],
        way: usize,
    ) -> Result<HeadState> {
        let emb = self.embed(tape, params, support_images)?;
        fit_head(tape, &self.head, emb, support_labels, way)
    }

    /// Differentiable logits of query images under an adapted head.
    pub fn head_logits_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        state: HeadState,
        query_images: Var,
    ) -> Result<Var> {
        let emb = self.embed(tape, params, query_images)?;
        let scale = self.head_scale_var(params);
        logits_from_embeddings(tape, &self.head, state, scale, emb)
    }
}

/// Detached head state.
#[derive(Clone, Debug, PartialEq)]
pub enum AdaptedHead<T: Real> {
    Prototypes(Tensor<T>),
    RidgeWeights(Tensor<T>),
}

/// Base parameters plus a head fit on one episode's support set. The base
/// parameters are borrowed and never modified.
#[derive(Clone, Debug)]
pub struct TaskAdaptedModel<'a, T: Real = f32> {
    pub config: &'a ModelConfig,
    pub params: &'a ModelParams<T>,
    pub head: AdaptedHead<T>,
    pub way: usize,
}

/// Fit the head on `episode`'s support set and return detached task state.
pub fn fine_tune<'a, T: Real>(
    config: &'a ModelConfig,
    params: &'a ModelParams<T>,
    support_images: &Tensor<T>,
    support_labels: &[usize],
    way: usize,
) -> Result<TaskAdaptedModel<'a, T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(support_images.clone());
    let head = match config.fine_tune_on(&mut tape, &bound, x, support_labels, way)? {
        HeadState::Prototypes(v) => AdaptedHead::Prototypes(tape.value(v).clone()),
        HeadState::RidgeWeights(v) => AdaptedHead::RidgeWeights(tape.value(v).clone()),
    };
    Ok(TaskAdaptedModel {
        config,
        params,
        head,
        way,
    })
}

/// [`fine_tune`] on an episode's support set.
pub fn fine_tune_episode<'a, T: Real>(
    config: &'a ModelConfig,
    params: &'a ModelParams<T>,
    episode: &Episode<T>,
) -> Result<TaskAdaptedModel<'a, T>> {
    fine_tune(
        config,
        params,
        &episode.support_images,
        &episode.support_labels,
        episode.way,
    )
}

impl<'a, T: Real> TaskAdaptedModel<'a, T> {
    /// Logits of `images` (already on `tape`) with parameters and head
    /// registered as constants, so only input gradients are produced.
    pub fn logits_on(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let bound = self.params.bind(tape, false);
        let state = match &self.head {
            AdaptedHead::Prototypes(t) => HeadState::Prototypes(tape.constant(t.clone())),
            AdaptedHead::RidgeWeights(t) => HeadState::RidgeWeights(tape.constant(t.clone())),
        };
        self.config.head_logits_on(tape, &bound, state, images)
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let l = self.logits_on(&mut tape, x)?;
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(images)?))
    }
}

/// Row-wise argmax of `[B, K]`; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
