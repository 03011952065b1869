//! Encoder/decoder stacks.
//!
//! Every top-level layer is followed by a LeakyReLU. A residual layer is
//! `x + conv1x1(relu(conv3x3(x)))` with both convolutions bias-free.
//!
//! `PaperSixLayer` (total stride 4):
//!
//! | encoder                      | decoder                          |
//! |------------------------------|----------------------------------|
//! | conv 4x4/2 C->16             | conv 3x3/1 D->32                 |
//! | conv 4x4/2 16->32            | residual 32                      |
//! | conv 3x3/1 32->32            | residual 32                      |
//! | residual 32                  | transposed conv 4x4/2 32->32     |
//! | residual 32                  | transposed conv 4x4/2 32->16     |
//! | conv 1x1/1 32->D             | conv 3x3/1 16->C                 |
//!
//! `AppendixFiveLayer` (total stride 2):
//!
//! | encoder                      | decoder                          |
//! |------------------------------|----------------------------------|
//! | conv 4x4/2 C->64             | conv 3x3/1 D->64                 |
//! | conv 3x3/1 64->64            | residual 64                      |
//! | residual 64                  | residual 64                      |
//! | residual 64                  | transposed conv 4x4/2 64->64     |
//! | conv 1x1/1 64->D             | conv 3x3/1 64->C                 |
//!
//! `TinyTest` is a 4-channel, total-stride-2 stack that exercises every op.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Conv, Graph, ParamSet, Var};
use super::tensor::{Shape, Tensor};
use super::NnError;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchVariant {
    PaperSixLayer,
    AppendixFiveLayer,
    TinyTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub variant: ArchVariant,
    pub in_channels: usize,
    pub latent_dim: usize,
    /// Negative slope of the LeakyReLU after each layer.
    pub leaky_slope: f64,
}

impl ArchSpec {
    pub fn new(variant: ArchVariant, in_channels: usize, latent_dim: usize) -> Self {
        Self {
            variant,
            in_channels,
            latent_dim,
            leaky_slope: 0.01,
        }
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.in_channels == 0 || self.latent_dim == 0 {
            return Err(NnError::InvalidArch(String::from(
                "channel counts must be positive",
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(NnError::InvalidArch(format!(
                "leaky slope must be finite and non-negative, got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        let (c, d) = (self.in_channels, self.latent_dim);
        match self.variant {
            ArchVariant::PaperSixLayer => vec![
                LayerSpec::conv(c, 16, 4, 2, 1),
                LayerSpec::conv(16, 32, 4, 2, 1),
                LayerSpec::conv(32, 32, 3, 1, 1),
                LayerSpec::Residual { channels: 32 },
                LayerSpec::Residual { channels: 32 },
                LayerSpec::conv(32, d, 1, 1, 0),
            ],
            ArchVariant::AppendixFiveLayer => vec![
                LayerSpec::conv(c, 64, 4, 2, 1),
                LayerSpec::conv(64, 64, 3, 1, 1),
                LayerSpec::Residual { channels: 64 },
                LayerSpec::Residual { channels: 64 },
                LayerSpec::conv(64, d, 1, 1, 0),
            ],
            ArchVariant::TinyTest => vec![
                LayerSpec::conv(c, 4, 4, 2, 1),
                LayerSpec::Residual { channels: 4 },
                LayerSpec::conv(4, d, 1, 1, 0),
            ],
        }
    }

    pub fn decoder_layers(&self) -> Vec<LayerSpec> {
        let (c, d) = (self.in_channels, self.latent_dim);
        match self.variant {
            ArchVariant::PaperSixLayer => vec![
                LayerSpec::conv(d, 32, 3, 1, 1),
                LayerSpec::Residual { channels: 32 },
                LayerSpec::Residual { channels: 32 },
                LayerSpec::transpose(32, 32, 4, 2, 1),
                LayerSpec::transpose(32, 16, 4, 2, 1),
                LayerSpec::conv(16, c, 3, 1, 1),
            ],
            ArchVariant::AppendixFiveLayer => vec![
                LayerSpec::conv(d, 64, 3, 1, 1),
                LayerSpec::Residual { channels: 64 },
                LayerSpec::Residual { channels: 64 },
                LayerSpec::transpose(64, 64, 4, 2, 1),
                LayerSpec::conv(64, c, 3, 1, 1),
            ],
            ArchVariant::TinyTest => vec![
                LayerSpec::conv(d, 4, 3, 1, 1),
                LayerSpec::Residual { channels: 4 },
                LayerSpec::transpose(4, 4, 4, 2, 1),
                LayerSpec::conv(4, c, 3, 1, 1),
            ],
        }
    }

    /// Spatial downsampling factor of the encoder.
    pub fn total_stride(&self) -> usize {
        self.encoder_layers()
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { stride, .. } => *stride,
                _ => 1,
            })
            .product()
    }

    pub fn latent_shape(&self, input: Shape) -> Result<Shape, NnError> {
        let s = self.total_stride();
        if input.h % s != 0 || input.w % s != 0 || input.h == 0 || input.w == 0 {
            return Err(NnError::StrideMismatch {
                shape: input,
                stride: s,
            });
        }
        if input.c != self.in_channels {
            return Err(NnError::ChannelMismatch {
                expected: self.in_channels,
                actual: input.c,
            });
        }
        Ok(Shape::new(input.n, input.h / s, input.w / s, self.latent_dim))
    }

    /// Scalar parameter counts `(encoder, decoder)`.
    pub fn param_counts(&self) -> (usize, usize) {
        let count = |layers: Vec<LayerSpec>| layers.iter().map(LayerSpec::param_count).sum();
        (count(self.encoder_layers()), count(self.decoder_layers()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Residual {
        channels: usize,
    },
}

impl LayerSpec {
    const fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> Self {
        Self::Conv {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: s,
            padding: p,
        }
    }

    const fn transpose(i: usize, o: usize, k: usize, s: usize, p: usize) -> Self {
        Self::ConvTranspose {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: s,
            padding: p,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Self::Conv {
                in_channels: i,
                out_channels: o,
                kernel: k,
                ..
            }
            | Self::ConvTranspose {
                in_channels: i,
                out_channels: o,
                kernel: k,
                ..
            } => k * k * i * o + o,
            Self::Residual { channels: c } => 9 * c * c + c * c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Conv(Conv),
    ConvTranspose(Conv),
    Residual { expand: Conv, project: Conv },
}

/// How freshly built parameters are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Kaiming-uniform over the fan-in with `a = sqrt(5)`, i.e. bounds
    /// `1/sqrt(fan_in)` for weights and biases.
    KaimingUniform,
    Zeros,
}

/// Encoder and decoder parameters plus their layer wiring.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder<T: Real> {
    spec: ArchSpec,
    params: ParamSet<T>,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    encoder_params: usize,
}

impl<T: Real> Autoencoder<T> {
    pub fn new<R: Rng + ?Sized>(spec: ArchSpec, init: Init, rng: &mut R) -> Result<Self, NnError> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let encoder = build(&mut params, "enc", &spec.encoder_layers(), init, rng);
        let encoder_params = params.len();
        let decoder = build(&mut params, "dec", &spec.decoder_layers(), init, rng);
        Ok(Self {
            spec,
            params,
            encoder,
            decoder,
            encoder_params,
        })
    }

    /// Rebuilds a network from a checkpointed flat parameter list.
    pub fn from_values(spec: ArchSpec, values: &[Vec<f64>]) -> Result<Self, NnError> {
        let mut net = Self::new(spec, Init::Zeros, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        if values.len() != net.params.len() {
            return Err(NnError::ParamCount {
                expected: net.params.len(),
                actual: values.len(),
            });
        }
        for (p, v) in net.params.iter_mut().zip(values) {
            if p.value.len() != v.len() {
                return Err(NnError::ShapeMismatch {
                    expected: p.value.len(),
                    actual: v.len(),
                });
            }
            for (dst, &src) in p.value.iter_mut().zip(v) {
                *dst = T::from_f64(src);
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Parameter tensors belonging to the encoder come first; this is the
    /// index of the first decoder tensor.
    pub fn encoder_param_tensors(&self) -> usize {
        self.encoder_params
    }

    /// Zeroes the weights and bias of the encoder's last layer.
    pub fn zero_encoder_output(&mut self) {
        if let Some(last) = self.encoder.last().copied() {
            zero_layer(&mut self.params, &last);
        }
    }

    pub fn values_f64(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|p| p.value.iter().map(|x| x.as_f64()).collect())
            .collect()
    }

    fn run(&self, g: &mut Graph<'_, T>, x: Var, layers: &[Layer]) -> Result<Var, NnError> {
        let slope = T::from_f64(self.spec.leaky_slope);
        let mut h = x;
        for layer in layers {
            h = match layer {
                Layer::Conv(c) => g.conv2d(h, c)?,
                Layer::ConvTranspose(c) => g.conv_transpose2d(h, c)?,
                Layer::Residual { expand, project } => {
                    let r = g.conv2d(h, expand)?;
                    let r = g.relu(r);
                    let r = g.conv2d(r, project)?;
                    g.add(h, r)?
                }
            };
            h = g.leaky_relu(h, slope);
        }
        Ok(h)
    }

    /// Records the encoder on `g`. Images are NHWC with values in `[0, 1]`.
    pub fn encode(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Var, NnError> {
        self.spec.latent_shape(g.value(images).shape())?;
        self.run(g, images, &self.encoder)
    }

    /// Records the decoder on `g`.
    pub fn decode(&self, g: &mut Graph<'_, T>, latents: Var) -> Result<Var, NnError> {
        let s = g.value(latents).shape();
        if s.c != self.spec.latent_dim {
            return Err(NnError::ChannelMismatch {
                expected: self.spec.latent_dim,
                actual: s.c,
            });
        }
        self.run(g, latents, &self.decoder)
    }

    /// Encoder forward pass without keeping a tape around.
    pub fn encode_tensor(&self, images: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut g = Graph::new(&self.params);
        let x = g.input(images.clone());
        let z = self.encode(&mut g, x)?;
        Ok(g.into_value(z))
    }

    pub fn decode_tensor(&self, latents: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut g = Graph::new(&self.params);
        let z = g.input(latents.clone());
        let y = self.decode(&mut g, z)?;
        Ok(g.into_value(y))
    }
}

fn zero_layer<T: Real>(params: &mut ParamSet<T>, layer: &Layer) {
    let convs: Vec<Conv> = match *layer {
        Layer::Conv(c) | Layer::ConvTranspose(c) => vec![c],
        Layer::Residual { expand, project } => vec![expand, project],
    };
    for c in convs {
        for id in core::iter::once(c.weight).chain(c.bias) {
            params.get_mut(id).value.iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

fn build<T: Real, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    prefix: &str,
    layers: &[LayerSpec],
    init: Init,
    rng: &mut R,
) -> Vec<Layer> {
    let mut fill = |n: usize, fan_in: usize| -> Vec<T> {
        match init {
            Init::Zeros => vec![T::zero(); n],
            Init::KaimingUniform => {
                let bound = 1.0 / libm::sqrt(fan_in as f64);
                (0..n)
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect()
            }
        }
    };
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let name = |part: &str| format!("{prefix}.{i}.{part}");
        out.push(match *layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let fan_in = kernel * kernel * in_channels;
                let w = fill(fan_in * out_channels, fan_in);
                let b = fill(out_channels, fan_in);
                let weight = params.push(name("weight"), vec![kernel, kernel, in_channels, out_channels], w);
                let bias = params.push(name("bias"), vec![out_channels], b);
                Layer::Conv(Conv {
                    weight,
                    bias: Some(bias),
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                })
            }
            LayerSpec::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                // PyTorch computes the fan-in of a transposed convolution from
                // the output channels.
                let fan_in = kernel * kernel * out_channels;
                let w = fill(in_channels * kernel * kernel * out_channels, fan_in);
                let b = fill(out_channels, fan_in);
                let weight = params.push(name("weight"), vec![in_channels, kernel, kernel, out_channels], w);
                let bias = params.push(name("bias"), vec![out_channels], b);
                Layer::ConvTranspose(Conv {
                    weight,
                    bias: Some(bias),
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                })
            }
            LayerSpec::Residual { channels } => {
                let w3 = fill(9 * channels * channels, 9 * channels);
                let w1 = fill(channels * channels, channels);
                let expand = params.push(name("conv3.weight"), vec![3, 3, channels, channels], w3);
                let project = params.push(name("conv1.weight"), vec![1, 1, channels, channels], w1);
                Layer::Residual {
                    expand: Conv {
                        weight: expand,
                        bias: None,
                        in_channels: channels,
                        out_channels: channels,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    project: Conv {
                        weight: project,
                        bias: None,
                        in_channels: channels,
                        out_channels: channels,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                    },
                }
            }
        });
    }
    out
}

/// Mean squared error over every element.
pub fn reconstruction_loss<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64, NnError> {
    if x.shape() != x_hat.shape() {
        return Err(NnError::ShapeMismatch {
            expected: x.shape().numel(),
            actual: x_hat.shape().numel(),
        });
    }
    let n = x.shape().numel().max(1) as f64;
    let sum: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = b.as_f64() - a.as_f64();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Gradient of [`reconstruction_loss`] with respect to `x_hat`.
pub fn reconstruction_grad<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if x.shape() != x_hat.shape() {
        return Err(NnError::ShapeMismatch {
            expected: x.shape().numel(),
            actual: x_hat.shape().numel(),
        });
    }
    let scale = T::from_f64(2.0 / x.shape().numel().max(1) as f64);
    let data = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (b - a) * scale)
        .collect();
    Tensor::from_vec(x.shape(), data)
}
