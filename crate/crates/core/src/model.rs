//! The fixed small CNN: conv(3→16) → relu → pool → conv(16→32) → relu → pool →
//! fc(2048→128) → relu → fc(128→10), with a handwritten backward pass.
//!
//! There is no normalization layer anywhere, so an averaged set of weights is a
//! complete model on its own.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{self, ConvLayerParams, DenseLayerParams, PoolIndices, Tensor};

const KERNEL: usize = 3;

/// Layer sizes. [`Architecture::CIFAR`] is the model used everywhere outside
/// of gradient-check tests, which use small variants of the same topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    /// Input height and width; must be divisible by 4.
    pub side: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Architecture {
    pub const CIFAR: Architecture = Architecture {
        in_channels: 3,
        side: 32,
        conv1: 16,
        conv2: 32,
        hidden: 128,
        classes: 10,
    };

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.side,
            self.conv1,
            self.conv2,
            self.hidden,
            self.classes,
        ];
        if dims.contains(&0) || self.side % 4 != 0 || self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "invalid architecture {self:?}"
            )));
        }
        Ok(())
    }

    /// Length of the flattened second pooling output.
    pub fn flat_dim(&self) -> usize {
        self.conv2 * (self.side / 4) * (self.side / 4)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.side, self.side]
    }

    /// Stable textual tag stored in checkpoints, e.g. `smallcnn-v1:3x32:16:32:128:10`.
    pub fn tag(&self) -> String {
        format!(
            "smallcnn-v1:{}x{}:{}:{}:{}:{}",
            self.in_channels, self.side, self.conv1, self.conv2, self.hidden, self.classes
        )
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized architecture tag `{tag}`"));
        let rest = tag.strip_prefix("smallcnn-v1:").ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let (c, s) = parts[0].split_once('x').ok_or_else(bad)?;
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        let arch = Architecture {
            in_channels: num(c)?,
            side: num(s)?,
            conv1: num(parts[1])?,
            conv2: num(parts[2])?,
            hidden: num(parts[3])?,
            classes: num(parts[4])?,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// All learnable weights of the network.
///
/// `revision` counts in-place updates (optimizer steps, averaging); a
/// [`ForwardCache`] remembers the revision it was built from so backward can
/// refuse a cache made with different weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub conv1: ConvLayerParams,
    pub conv2: ConvLayerParams,
    pub fc1: DenseLayerParams,
    pub fc2: DenseLayerParams,
    pub revision: u64,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub conv1: ConvLayerParams,
    pub conv2: ConvLayerParams,
    pub fc1: DenseLayerParams,
    pub fc2: DenseLayerParams,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(ModelParams {
            arch,
            conv1: ConvLayerParams::zeros(arch.conv1, arch.in_channels, KERNEL),
            conv2: ConvLayerParams::zeros(arch.conv2, arch.conv1, KERNEL),
            fc1: DenseLayerParams::zeros(arch.hidden, arch.flat_dim()),
            fc2: DenseLayerParams::zeros(arch.classes, arch.hidden),
            revision: 0,
        })
    }

    /// He initialization: weights `~ N(0, 2 / fan_in)`, biases zero.
    ///
    /// Draws come from the [`Stream::Init`] ChaCha8 stream in layer order
    /// (conv1, conv2, fc1, fc2), row-major within each weight tensor.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let mut rng = rng::stream(seed, Stream::Init);
        let fill = |t: &mut Tensor, fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let std = (2.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
        };
        fill(&mut params.conv1.kernels, arch.in_channels * KERNEL * KERNEL, &mut rng);
        fill(&mut params.conv2.kernels, arch.conv1 * KERNEL * KERNEL, &mut rng);
        fill(&mut params.fc1.weight, arch.flat_dim(), &mut rng);
        fill(&mut params.fc2.weight, arch.hidden, &mut rng);
        Ok(params)
    }

    /// Weight tensors in checkpoint order.
    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.conv1.kernels,
            &self.conv1.bias,
            &self.conv2.kernels,
            &self.conv2.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    /// Mutable access to every weight tensor. Bumps the revision.
    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        self.revision += 1;
        [
            &mut self.conv1.kernels,
            &mut self.conv1.bias,
            &mut self.conv2.kernels,
            &mut self.conv2.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Whether all weight values are bitwise equal (revision is ignored).
    pub fn same_weights(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| {
                    a.shape() == b.shape()
                        && a.data()
                            .iter()
                            .zip(b.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let a = params.arch;
        ParamGrads {
            conv1: ConvLayerParams::zeros(a.conv1, a.in_channels, KERNEL),
            conv2: ConvLayerParams::zeros(a.conv2, a.conv1, KERNEL),
            fc1: DenseLayerParams::zeros(a.hidden, a.flat_dim()),
            fc2: DenseLayerParams::zeros(a.classes, a.hidden),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.conv1.kernels,
            &self.conv1.bias,
            &self.conv2.kernels,
            &self.conv2.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1.kernels,
            &mut self.conv1.bias,
            &mut self.conv2.kernels,
            &mut self.conv2.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

/// Intermediate values from [`forward`] needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    arch: Architecture,
    revision: u64,
    input: Tensor,
    conv1_pre: Tensor,
    pool1_idx: PoolIndices,
    pool1_out: Tensor,
    conv2_pre: Tensor,
    pool2_idx: PoolIndices,
    flat: Tensor,
    fc1_pre: Tensor,
    hidden: Tensor,
}

impl ForwardCache {
    /// Signs of every ReLU pre-activation plus every pooling argmax. Two inputs
    /// with the same pattern lie in the same linear region of the network.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<usize>) {
        let signs = [&self.conv1_pre, &self.conv2_pre, &self.fc1_pre]
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect();
        let idx = self
            .pool1_idx
            .0
            .iter()
            .chain(&self.pool2_idx.0)
            .copied()
            .collect();
        (signs, idx)
    }

    /// Smallest |pre-activation| over all ReLUs, for excluding kinks in numerical checks.
    pub fn min_abs_preactivation(&self) -> f64 {
        [&self.conv1_pre, &self.conv2_pre, &self.fc1_pre]
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Runs the network on one `[C, side, side]` image, returning the logits.
pub fn forward(params: &ModelParams, image: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let arch = params.arch;
    image.expect_shape("forward input", &arch.input_shape())?;
    let conv1_pre = tensor::conv2d(image, &params.conv1)?;
    let (pool1_out, pool1_idx) = tensor::maxpool2(&tensor::relu(&conv1_pre))?;
    let conv2_pre = tensor::conv2d(&pool1_out, &params.conv2)?;
    let (pool2_out, pool2_idx) = tensor::maxpool2(&tensor::relu(&conv2_pre))?;
    let flat = pool2_out.reshape(&[arch.flat_dim()])?;
    let fc1_pre = tensor::dense(&flat, &params.fc1)?;
    let hidden = tensor::relu(&fc1_pre);
    let logits = tensor::dense(&hidden, &params.fc2)?;
    let cache = ForwardCache {
        arch,
        revision: params.revision,
        input: image.clone(),
        conv1_pre,
        pool1_idx,
        pool1_out,
        conv2_pre,
        pool2_idx,
        flat,
        fc1_pre,
        hidden,
    };
    Ok((logits, cache))
}

pub fn logits(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    forward(params, image).map(|(z, _)| z)
}

fn check_cache(params: &ModelParams, cache: &ForwardCache, grad_logits: &Tensor) -> Result<()> {
    if cache.arch != params.arch {
        return Err(Error::Architecture {
            expected: params.arch.tag(),
            actual: cache.arch.tag(),
        });
    }
    if cache.revision != params.revision {
        return Err(Error::StaleCache {
            cached: cache.revision,
            current: params.revision,
        });
    }
    grad_logits.expect_shape("backward grad_logits", &[params.arch.classes])
}

/// Full backward pass: parameter gradients and the gradient with respect to the input image.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_logits: &Tensor,
) -> Result<(ParamGrads, Tensor)> {
    check_cache(params, cache, grad_logits)?;
    let arch = params.arch;
    let (g_hidden, fc2) = tensor::dense_grad(&cache.hidden, &params.fc2, grad_logits)?;
    let g_fc1_pre = tensor::relu_grad(&cache.fc1_pre, &g_hidden)?;
    let (g_flat, fc1) = tensor::dense_grad(&cache.flat, &params.fc1, &g_fc1_pre)?;
    let g_pool2 = g_flat.reshape(&[arch.conv2, arch.side / 4, arch.side / 4])?;
    let g_relu2 = tensor::maxpool2_grad(cache.conv2_pre.shape(), &cache.pool2_idx, &g_pool2)?;
    let g_conv2_pre = tensor::relu_grad(&cache.conv2_pre, &g_relu2)?;
    let (g_pool1, conv2) = tensor::conv2d_grad(&cache.pool1_out, &params.conv2, &g_conv2_pre)?;
    let g_relu1 = tensor::maxpool2_grad(cache.conv1_pre.shape(), &cache.pool1_idx, &g_pool1)?;
    let g_conv1_pre = tensor::relu_grad(&cache.conv1_pre, &g_relu1)?;
    let (g_input, conv1) = tensor::conv2d_grad(&cache.input, &params.conv1, &g_conv1_pre)?;
    Ok((
        ParamGrads {
            conv1,
            conv2,
            fc1,
            fc2,
        },
        g_input,
    ))
}

/// Gradient with respect to the input only; skips the parameter gradients.
/// This is what attacks call on every step.
pub fn input_gradient(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_logits: &Tensor,
) -> Result<Tensor> {
    check_cache(params, cache, grad_logits)?;
    let arch = params.arch;
    let g_hidden = tensor::dense_grad_input(&cache.hidden, &params.fc2, grad_logits)?;
    let g_fc1_pre = tensor::relu_grad(&cache.fc1_pre, &g_hidden)?;
    let g_flat = tensor::dense_grad_input(&cache.flat, &params.fc1, &g_fc1_pre)?;
    let g_pool2 = g_flat.reshape(&[arch.conv2, arch.side / 4, arch.side / 4])?;
    let g_relu2 = tensor::maxpool2_grad(cache.conv2_pre.shape(), &cache.pool2_idx, &g_pool2)?;
    let g_conv2_pre = tensor::relu_grad(&cache.conv2_pre, &g_relu2)?;
    let g_pool1 = tensor::conv2d_grad_input(&cache.pool1_out, &params.conv2, &g_conv2_pre)?;
    let g_relu1 = tensor::maxpool2_grad(cache.conv1_pre.shape(), &cache.pool1_idx, &g_pool1)?;
    let g_conv1_pre = tensor::relu_grad(&cache.conv1_pre, &g_relu1)?;
    tensor::conv2d_grad_input(&cache.input, &params.conv1, &g_conv1_pre)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ModelParams, image: &Tensor) -> Result<usize> {
    Ok(argmax(logits(params, image)?.data()))
}
