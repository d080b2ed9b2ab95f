//! Parameter checkpoints: one line of UTF-8 JSON header, a newline, then the
//! raw little-endian f32 payload of every tensor in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_FORMAT: &str = "lcat-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub params: Vec<TensorEntry>,
    pub model: ModelConfig,
    /// Echo of the run configuration that produced the checkpoint.
    pub config: serde_json::Value,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: Option<RngState>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn new<T: Real>(
        model: &ModelConfig,
        params: &ModelParams<T>,
        config: serde_json::Value,
        epoch: usize,
        rng: Option<RngState>,
    ) -> Self {
        let params = params.cast::<f32>();
        let entries = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.to_string(),
                params: entries,
                model: model.clone(),
                config,
                epoch,
                rng,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
                header.format
            )));
        }
        let layout = header.model.param_layout();
        let declared: Vec<(String, Vec<usize>)> = header
            .params
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone()))
            .collect();
        if layout != declared {
            return Err(Error::Checkpoint(
                "parameter list does not match the model config".into(),
            ));
        }
        let payload = &bytes[nl + 1..];
        let needed: usize = header
            .params
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 4)
            .sum();
        if payload.len() != needed {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, header declares {needed}",
                payload.len()
            )));
        }
        let mut chunks = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for e in &header.params {
            let n = e.shape.iter().product();
            let data: Vec<f32> = chunks.by_ref().take(n).collect();
            tensors.push(Tensor::new(e.shape.clone(), data)?);
            names.push(e.name.clone());
        }
        let params = ModelParams::new(names, tensors)?;
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadConfig;
    use crate::model::EmbeddingNetConfig;
    use crate::rng;

    #[test]
    fn round_trip_is_lossless() {
        let model = ModelConfig {
            net: EmbeddingNetConfig::desk(1, 8, 8),
            head: HeadConfig::ridge(),
        };
        let mut r = rng::seeded(3);
        let params = model.init_params(&mut r).unwrap();
        let ck = Checkpoint::new(
            &model,
            &params,
            serde_json::json!({"seed": 3}),
            7,
            Some(RngState::capture(&r)),
        );
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.params.flat(), params.flat());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"{}").is_err());
    }
}
