//! Convolutional feature extractor producing the patch feature map.
//!
//! Each spatial position of the output map is one patch (instance) of the
//! input image. Two presets are provided: the AlexNet convolutional stack
//! (227x227 input, 256x6x6 output) and a small three-stage network for
//! 64x64 inputs (32x6x6 output) that trains in seconds on a CPU.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::GrayImage;
use crate::params::ModelParams;
use crate::scalar::Real;
use crate::tensor::{conv_output_len, Tensor};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Pool {
        kernel: usize,
        stride: usize,
    },
}

impl Layer {
    pub const fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Layer::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub const fn pool(kernel: usize, stride: usize) -> Self {
        Layer::Pool { kernel, stride }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    AlexNetConv,
    Tiny,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::Tiny, Preset::AlexNetConv];

    pub fn name(self) -> &'static str {
        match self {
            Preset::AlexNetConv => "alexnet-conv",
            Preset::Tiny => "tiny",
        }
    }

    pub fn config(self) -> BackboneConfig {
        match self {
            Preset::AlexNetConv => BackboneConfig {
                in_channels: 3,
                input_side: 227,
                layers: vec![
                    Layer::conv(96, 11, 4, 0),
                    Layer::Relu,
                    Layer::pool(3, 2),
                    Layer::conv(256, 5, 1, 2),
                    Layer::Relu,
                    Layer::pool(3, 2),
                    Layer::conv(384, 3, 1, 1),
                    Layer::Relu,
                    Layer::conv(384, 3, 1, 1),
                    Layer::Relu,
                    Layer::conv(256, 3, 1, 1),
                    Layer::Relu,
                    Layer::pool(3, 2),
                ],
                output: (256, 6, 6),
            },
            Preset::Tiny => BackboneConfig {
                in_channels: 1,
                input_side: 64,
                layers: vec![
                    Layer::conv(8, 5, 1, 0),
                    Layer::Relu,
                    Layer::pool(2, 2),
                    Layer::conv(16, 3, 1, 0),
                    Layer::Relu,
                    Layer::pool(2, 2),
                    Layer::conv(32, 3, 1, 0),
                    Layer::Relu,
                    Layer::pool(2, 2),
                ],
                output: (32, 6, 6),
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::invalid(
                "preset",
                format!("unknown preset `{s}` (expected one of: tiny, alexnet-conv)"),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Channels of the input tensor. A grayscale image is replicated into
    /// every channel.
    pub in_channels: usize,
    pub input_side: usize,
    pub layers: Vec<Layer>,
    /// Declared `(channels, height, width)` of the feature map.
    pub output: (usize, usize, usize),
}

impl BackboneConfig {
    /// Runs the layer shape rules over the input size.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        if self.in_channels == 0 || self.input_side == 0 {
            return Err(Error::invalid(
                "backbone",
                "input channels and side length must be positive",
            ));
        }
        let (mut c, mut h, mut w) = (self.in_channels, self.input_side, self.input_side);
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, s, p) = match *layer {
                Layer::Relu => continue,
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if out_channels == 0 {
                        return Err(Error::invalid(
                            "backbone",
                            format!("layer {i}: conv with zero output channels"),
                        ));
                    }
                    c = out_channels;
                    (kernel, stride, pad)
                }
                Layer::Pool { kernel, stride } => (kernel, stride, 0),
            };
            match (conv_output_len(h, k, s, p), conv_output_len(w, k, s, p)) {
                (Some(nh), Some(nw)) => {
                    h = nh;
                    w = nw;
                }
                _ => {
                    return Err(Error::invalid(
                        "backbone",
                        format!("layer {i} ({layer:?}) does not fit a {h}x{w} input"),
                    ))
                }
            }
        }
        Ok((c, h, w))
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.output_shape()?;
        if shape != self.output {
            return Err(Error::invalid(
                "backbone",
                format!("layers produce {shape:?} but the declared output is {:?}", self.output),
            ));
        }
        Ok(())
    }

    /// Number of patches `m = H' * W'`.
    pub fn num_patches(&self) -> usize {
        self.output.1 * self.output.2
    }

    pub fn feature_channels(&self) -> usize {
        self.output.0
    }

    /// `(start, stride)` of the patch grid in input pixel coordinates:
    /// position `i` of the feature map is centred at `start + i * stride`,
    /// where pixel `p` spans `[p, p + 1)`.
    pub fn patch_grid(&self) -> (f64, f64) {
        // centre of the first window, in pixel-index units
        let mut start = 0.0;
        let mut jump = 1.0;
        for layer in &self.layers {
            let (k, s, p) = match *layer {
                Layer::Relu => continue,
                Layer::Conv {
                    kernel, stride, pad, ..
                } => (kernel, stride, pad),
                Layer::Pool { kernel, stride } => (kernel, stride, 0),
            };
            start += ((k as f64 - 1.0) / 2.0 - p as f64) * jump;
            jump *= s as f64;
        }
        (start + 0.5, jump)
    }

    /// Side of the square input window seen by one output patch.
    pub fn receptive_field(&self) -> usize {
        let mut size = 1;
        let mut jump = 1;
        for layer in &self.layers {
            let (k, s) = match *layer {
                Layer::Relu => continue,
                Layer::Conv { kernel, stride, .. } | Layer::Pool { kernel, stride } => (kernel, stride),
            };
            size += (k - 1) * jump;
            jump *= s;
        }
        size
    }

    /// Number of patches whose receptive field overlaps a centred square
    /// covering `area_frac` of the input, at least one.
    pub fn patches_covering(&self, area_frac: f64) -> usize {
        let side = self.input_side as f64;
        let half_mass = libm::sqrt(area_frac.clamp(0.0, 1.0)) * side / 2.0;
        let half_field = self.receptive_field() as f64 / 2.0;
        let centre = side / 2.0;
        let (start, stride) = self.patch_grid();
        let hits = |n: usize| {
            (0..n)
                .filter(|&i| libm::fabs(start + i as f64 * stride - centre) < half_mass + half_field)
                .count()
        };
        (hits(self.output.1) * hits(self.output.2)).max(1)
    }

    /// Centre `(x, y)` of patch `index` (row-major over the feature map) in
    /// input pixel coordinates.
    pub fn patch_center(&self, index: usize) -> (f64, f64) {
        let (start, stride) = self.patch_grid();
        let w = self.output.2;
        let (row, col) = (index / w, index % w);
        (start + col as f64 * stride, start + row as f64 * stride)
    }

    /// Parameter names and shapes, backbone first, then the head.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut c = self.in_channels;
        let mut idx = 0;
        for layer in &self.layers {
            if let Layer::Conv {
                out_channels, kernel, ..
            } = *layer
            {
                idx += 1;
                shapes.push((format!("conv{idx}.weight"), vec![out_channels, c, kernel, kernel]));
                shapes.push((format!("conv{idx}.bias"), vec![out_channels]));
                c = out_channels;
            }
        }
        shapes.push((HEAD_WEIGHT.into(), vec![self.output.0]));
        shapes.push((HEAD_BIAS.into(), vec![1]));
        shapes
    }

    /// Zero-filled parameters with the right layout.
    pub fn zero_params<T: Real>(&self) -> ModelParams<T> {
        let mut params = ModelParams::new();
        for (name, dims) in self.param_shapes() {
            params.push(name, Tensor::zeros(&dims));
        }
        params
    }

    /// Allocates and initialises all backbone and head parameters.
    ///
    /// Conv kernels are drawn from `N(0, 2 / fan_in)`, the head weight from
    /// `N(0, 1 / N_c)`; biases start at zero.
    pub fn build(&self, seed: u64) -> Result<ModelParams<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        for (name, dims) in self.param_shapes() {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = dims[1..].iter().product::<usize>().max(1);
                let std = if name == HEAD_WEIGHT {
                    libm::sqrt(1.0 / dims[0] as f64)
                } else {
                    libm::sqrt(2.0 / fan_in as f64)
                };
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * std) as f32
                    })
                    .collect()
            };
            params.push(name, Tensor::new(dims, data)?);
        }
        Ok(params)
    }

    /// Converts an image of side `input_side` to the `[C, H, W]` network
    /// input, scaling intensities to `[0, 1]`.
    pub fn image_tensor<T: Real>(&self, image: &GrayImage) -> Result<Tensor<T>> {
        if image.width() != self.input_side || image.height() != self.input_side {
            return Err(Error::shape(
                "backbone",
                format!(
                    "image is {}x{} but the backbone expects {}x{}",
                    image.width(),
                    image.height(),
                    self.input_side,
                    self.input_side
                ),
            ));
        }
        let scale = T::from_f64(1.0 / 255.0);
        let plane: Vec<T> = image
            .pixels()
            .iter()
            .map(|&p| T::from_f64(f64::from(p)) * scale)
            .collect();
        let mut data = Vec::with_capacity(plane.len() * self.in_channels);
        for _ in 0..self.in_channels {
            data.extend_from_slice(&plane);
        }
        Tensor::new(vec![self.in_channels, image.height(), image.width()], data)
    }
}

/// Graph handles for every tensor in a [`ModelParams`], in the same order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    nodes: Vec<NodeId>,
}

impl BoundParams {
    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind<T: Real>(graph: &mut Graph<T>, params: &ModelParams<T>) -> Self {
        let mut names = Vec::with_capacity(params.len());
        let mut nodes = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            names.push(String::from(name));
            nodes.push(graph.param(t.clone()));
        }
        Self { names, nodes }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.nodes[i])
            .ok_or_else(|| Error::MissingParam(String::from(name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.names.iter().map(String::as_str).zip(self.nodes.iter().copied())
    }

    /// Nodes that enter the L2 penalty.
    pub fn regularized(&self) -> Vec<NodeId> {
        self.iter()
            .filter(|(n, _)| ModelParams::<f32>::is_regularized(n))
            .map(|(_, id)| id)
            .collect()
    }

    /// Collects the gradient of every parameter after `backward`, zeros for
    /// parameters the loss does not touch.
    pub fn gradients<T: Real>(&self, graph: &Graph<T>) -> ModelParams<T> {
        let mut out = ModelParams::new();
        for (name, id) in self.iter() {
            let g = graph
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(id).dims()));
            out.push(name, g);
        }
        out
    }
}

/// Runs the backbone on `input` (a `[C, H, W]` node) and returns the
/// feature map node `[N_c, H', W']`.
pub fn forward<T: Real>(
    config: &BackboneConfig,
    graph: &mut Graph<T>,
    params: &BoundParams,
    input: NodeId,
) -> Result<NodeId> {
    let dims = graph.value(input).dims();
    let expected = [config.in_channels, config.input_side, config.input_side];
    if dims != expected {
        return Err(Error::shape(
            "backbone",
            format!("input is {dims:?} but the backbone expects {expected:?}"),
        ));
    }
    let mut x = input;
    let mut conv_idx = 0;
    for layer in &config.layers {
        x = match *layer {
            Layer::Conv { stride, pad, .. } => {
                conv_idx += 1;
                let k = params.get(&format!("conv{conv_idx}.weight"))?;
                let b = params.get(&format!("conv{conv_idx}.bias"))?;
                graph.conv2d(x, k, b, stride, pad)?
            }
            Layer::Relu => graph.relu(x)?,
            Layer::Pool { kernel, stride } => graph.maxpool2d(x, kernel, stride)?,
        };
    }
    Ok(x)
}
