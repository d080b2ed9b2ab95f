//! Episodic N-way K-shot task sampling.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetStore, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub way: usize,
    pub shot: usize,
    /// Query images per class.
    #[serde(default = "default_query")]
    pub query: usize,
    pub split: Split,
}

fn default_query() -> usize {
    15
}

impl SamplerConfig {
    pub fn new(way: usize, shot: usize, query: usize, split: Split) -> Self {
        SamplerConfig {
            way,
            shot,
            query,
            split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot < 1 || self.query < 1 {
            return Err(Error::config(format!(
                "sampler needs way >= 2, shot >= 1, query >= 1 (got {}-way {}-shot {} query)",
                self.way, self.shot, self.query
            )));
        }
        Ok(())
    }
}

/// One few-shot task. Support and query images are grouped by local class:
/// item `i` of the support set has label `i / shot`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T: Real = f32> {
    pub support_images: Tensor<T>,
    pub support_labels: Vec<usize>,
    pub query_images: Tensor<T>,
    pub query_labels: Vec<usize>,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Global class of each local label.
    pub classes: Vec<usize>,
    /// Store indices of the support and query images, for auditing.
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

impl<T: Real> Episode<T> {
    /// Assemble an episode from explicit image tensors; labels follow the
    /// class-grouped layout.
    pub fn from_parts(
        support_images: Tensor<T>,
        query_images: Tensor<T>,
        way: usize,
        shot: usize,
        query: usize,
    ) -> Result<Self> {
        if support_images.shape()[0] != way * shot || query_images.shape()[0] != way * query {
            return Err(Error::shape(
                "episode",
                format!(
                    "{way}-way {shot}-shot {query}-query needs {} support and {} query images, got {:?} and {:?}",
                    way * shot,
                    way * query,
                    support_images.shape(),
                    query_images.shape()
                ),
            ));
        }
        Ok(Episode {
            support_images,
            support_labels: (0..way * shot).map(|i| i / shot).collect(),
            query_images,
            query_labels: (0..way * query).map(|i| i / query).collect(),
            way,
            shot,
            query,
            classes: (0..way).collect(),
            support_ids: Vec::new(),
            query_ids: Vec::new(),
        })
    }

    pub fn cast<U: Real>(&self) -> Episode<U> {
        Episode {
            support_images: self.support_images.cast(),
            support_labels: self.support_labels.clone(),
            query_images: self.query_images.cast(),
            query_labels: self.query_labels.clone(),
            way: self.way,
            shot: self.shot,
            query: self.query,
            classes: self.classes.clone(),
            support_ids: self.support_ids.clone(),
            query_ids: self.query_ids.clone(),
        }
    }
}

/// Draw one episode: `way` distinct classes of the configured split chosen
/// uniformly, then `shot + query` distinct images per class.
pub fn sample_episode(store: &DatasetStore, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Episode> {
    cfg.validate()?;
    let pool = store.classes_in(cfg.split);
    let per_class = cfg.shot + cfg.query;
    if let Some(&c) = pool.iter().find(|&&c| store.class_images(c).len() < per_class) {
        return Err(Error::InsufficientData(format!(
            "class {c} has {} images, episode needs {per_class}",
            store.class_images(c).len()
        )));
    }
    if pool.len() < cfg.way {
        return Err(Error::InsufficientData(format!(
            "{:?} split has {} classes, episode needs {}",
            cfg.split,
            pool.len(),
            cfg.way
        )));
    }

    let chosen: Vec<usize> = index::sample(rng, pool.len(), cfg.way)
        .into_iter()
        .map(|i| pool[i])
        .collect();

    let mut support_ids = Vec::with_capacity(cfg.way * cfg.shot);
    let mut query_ids = Vec::with_capacity(cfg.way * cfg.query);
    for &class in &chosen {
        let members = store.class_images(class);
        let picks = index::sample(rng, members.len(), per_class).into_vec();
        support_ids.extend(picks[..cfg.shot].iter().map(|&i| members[i]));
        query_ids.extend(picks[cfg.shot..].iter().map(|&i| members[i]));
    }

    Ok(Episode {
        support_images: store.images().gather_outer(&support_ids),
        support_labels: (0..cfg.way * cfg.shot).map(|i| i / cfg.shot).collect(),
        query_images: store.images().gather_outer(&query_ids),
        query_labels: (0..cfg.way * cfg.query).map(|i| i / cfg.query).collect(),
        way: cfg.way,
        shot: cfg.shot,
        query: cfg.query,
        classes: chosen,
        support_ids,
        query_ids,
    })
}

/// `n` consecutive episodes from one advancing stream.
pub fn sample_batch(store: &DatasetStore, cfg: &SamplerConfig, n: usize, rng: &mut Rng) -> Result<Vec<Episode>> {
    (0..n).map(|_| sample_episode(store, cfg, rng)).collect()
}
