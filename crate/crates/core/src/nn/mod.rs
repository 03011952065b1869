//! A small reverse-mode autodiff engine for NHWC convolutional networks and
//! the encoder/decoder stacks built on it.

mod arch;
mod graph;
mod tensor;

pub use arch::{
    reconstruction_grad, reconstruction_loss, ArchSpec, ArchVariant, Autoencoder, Init, LayerSpec,
};
pub use graph::{Conv, Gradients, Graph, Param, ParamId, ParamSet, Var};
pub use tensor::{Shape, Tensor};

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected} elements, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("input {shape} is not divisible by total stride {stride}")]
    StrideMismatch { shape: Shape, stride: usize },
    #[error("input {shape} is too small for kernel {kernel}")]
    InputTooSmall { shape: Shape, kernel: usize },
    #[error("expected {expected} parameter tensors, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
}
