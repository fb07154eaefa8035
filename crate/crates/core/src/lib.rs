//! Attention-aware feature learning for person re-identification.
//!
//! This crate holds the numerical core: a small reverse-mode autodiff engine,
//! the backbone / holistic-attention / partial-attention network, the training
//! objectives, a procedural renderer for labelled person images, retrieval
//! metrics and gradient-weighted attention maps. It needs only `alloc`; file
//! formats, the training driver and the command line live in the `daaf` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod model;
pub mod probes;
pub mod real;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
