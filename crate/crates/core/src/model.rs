//! Convolutional embedding network and its parameter container.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// 2x2 mean pooling, stride 2.
    Mean2,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Stack of `conv -> bias -> [denoise] -> activation -> pool` blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingNetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each block; the block count is its length.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub pooling: Pooling,
    pub activation: Activation,
    pub denoise: bool,
}

impl EmbeddingNetConfig {
    /// Desk-scale backbone: three 3x3 blocks of (8, 16, 16) channels with
    /// 2x2 mean pooling and ReLU.
    pub fn desk(in_channels: usize, height: usize, width: usize) -> Self {
        EmbeddingNetConfig {
            in_channels,
            height,
            width,
            channels: vec![8, 16, 16],
            kernel_size: 3,
            pooling: Pooling::Mean2,
            activation: Activation::Relu,
            denoise: true,
        }
    }

    /// Spatial size after all blocks.
    pub fn output_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.height, self.width);
        if self.pooling == Pooling::Mean2 {
            for _ in &self.channels {
                h /= 2;
                w /= 2;
            }
        }
        (h, w)
    }

    pub fn embedding_dim(&self) -> usize {
        let (h, w) = self.output_hw();
        self.channels.last().copied().unwrap_or(0) * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config(
                "embedding net needs at least one block with positive channels",
            ));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("embedding net input dimensions must be positive"));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        let (h, w) = self.output_hw();
        if h == 0 || w == 0 {
            return Err(Error::config(format!(
                "{}x{} input is too small for {} pooled blocks",
                self.height,
                self.width,
                self.channels.len()
            )));
        }
        if self.embedding_dim() < 2 {
            return Err(Error::config("embedding_dim must be at least 2"));
        }
        Ok(())
    }
}

/// Network plus few-shot head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub net: EmbeddingNetConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.head.validate()
    }

    /// Parameter names and shapes in registration order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let net = &self.net;
        let mut out = Vec::new();
        let mut c_in = net.in_channels;
        for (i, &c) in net.channels.iter().enumerate() {
            out.push((
                format!("block{i}.conv.weight"),
                vec![c, c_in, net.kernel_size, net.kernel_size],
            ));
            out.push((format!("block{i}.conv.bias"), vec![c]));
            if net.denoise {
                out.push((format!("block{i}.denoise.proj"), vec![c, c, 1, 1]));
            }
            c_in = c;
        }
        if self.head.learn_scale {
            out.push(("head.scale".to_string(), vec![1]));
        }
        out
    }

    /// He-uniform conv kernels, zero biases, zero denoise projections.
    pub fn init_params(&self, rng: &mut Rng) -> Result<ModelParams<f32>> {
        self.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in self.param_layout() {
            let t = if name.ends_with("conv.weight") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = (6.0 / fan_in).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound) as f32)
            } else if name == "head.scale" {
                Tensor::full(&shape, self.head.ridge_scale as f32)
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            tensors.push(t);
        }
        ModelParams::new(names, tensors)
    }

    /// Forward the embedding network on `images: [B, C, H, W]`, producing `[B, D]`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, params: &BoundParams, images: Var) -> Result<Var> {
        let net = &self.net;
        let s = tape.shape(images);
        if s.len() != 4 || s[1..] != [net.in_channels, net.height, net.width] {
            return Err(Error::ShapeMismatch {
                op: "embed",
                left: s.to_vec(),
                right: vec![0, net.in_channels, net.height, net.width],
            });
        }
        let mut x = images;
        let mut cursor = 0;
        for _ in &net.channels {
            let w = params.vars[cursor];
            let b = params.vars[cursor + 1];
            cursor += 2;
            x = tape.conv2d(x, w, 1, net.kernel_size / 2)?;
            x = tape.bias_add(x, b)?;
            if net.denoise {
                x = denoise_forward(tape, x, params.vars[cursor])?;
                cursor += 1;
            }
            if net.activation == Activation::Relu {
                x = tape.relu(x);
            }
            if net.pooling == Pooling::Mean2 {
                x = tape.avg_pool(x, 2)?;
            }
        }
        tape.flatten(x)
    }

    pub(crate) fn head_scale_var(&self, params: &BoundParams) -> Option<Var> {
        self.head
            .learn_scale
            .then(|| *params.vars.last().expect("head.scale registered last"))
    }
}

/// Residual feature smoothing: `f + proj ⊛ box3x3(f)` with a zero-padded
/// 3x3 mean filter and a 1x1 projection kernel `[C, C, 1, 1]`.
pub fn denoise_forward<T: Real>(tape: &mut Tape<T>, features: Var, projection: Var) -> Result<Var> {
    let smooth = tape.box_filter3(features)?;
    let mixed = tape.conv2d(smooth, projection, 1, 0)?;
    tape.add(features, mixed)
}

/// Ordered, named parameter tensors. The name set is fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Tape handles of a registered [`ModelParams`], in the same order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl<T: Real> ModelParams<T> {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::config("parameter names and tensors differ in count"));
        }
        Ok(ModelParams { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Put every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.var(t.clone(), requires_grad))
                .collect(),
        }
    }

    /// Gradients of a bound copy after backward; missing gradients are zero.
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &BoundParams) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Mutable access to the tensors in order, for optimizers.
    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Every parameter scalar, flattened in order.
    pub fn flat(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.scalar_count() {
            return Err(Error::shape(
                "set_flat",
                format!("{} values for {} parameters", values.len(), self.scalar_count()),
            ));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
