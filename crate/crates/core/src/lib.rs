//! Core of the audio-visual Q-Former fusion model.
//!
//! Everything here is pure computation over `alloc` containers: a small
//! reverse-mode autodiff tensor library, the mel-spectrogram front-end,
//! frozen stand-in media encoders, the trainable Q-Former branches, a tiny
//! frozen causal LM with soft-prompt conditioning, the optimizer, and the
//! synthetic scene grammar used to build training corpora. File formats,
//! manifests and the CLI live in the `avqformer` crate.

#![no_std]

extern crate alloc;

pub mod audio;
pub mod batch;
pub mod encoders;
mod error;
pub mod fft;
pub mod gradcheck;
mod kernels;
pub mod lm;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod qformer;
mod real;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use rng::RngState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Init, Tensor};
