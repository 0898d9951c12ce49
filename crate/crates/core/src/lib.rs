//! Hierarchical classifier-block convolutional network for source camera
//! brand and model identification.
//!
//! This crate is `no_std` (it needs `alloc`) and carries every pure part of
//! the pipeline: homogeneous patch selection, hierarchical quota balancing,
//! dataset hierarchy rules and leave-one-device-out folds, a small tape-based
//! autograd engine, the hierarchical and flat network heads, training and
//! majority-vote inference, and a deterministic synthetic camera generator.
//! File formats, image decoding and the command line live in the `hcb` crate.

#![no_std]
#![deny(rust_2018_idioms)]

extern crate alloc;

pub mod autograd;
pub mod balance;
mod error;
pub mod hcbnet;
pub mod image;
pub mod manifest;
pub mod patchex;
pub mod pipeline;
mod real;
pub mod rng;
pub mod synth;
mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
