//! Learnable-lattice vector quantization: lattice math, quantization layers,
//! a small convolutional autoencoder and the training step.
//!
//! Builds without `std` (an allocator is required). The default `std`
//! feature only forwards to dependencies.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod lattice;
pub mod nn;
pub mod quantize;
pub mod real;
pub mod optim;
pub mod train;
pub mod census;
