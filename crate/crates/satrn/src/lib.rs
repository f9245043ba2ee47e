//! Scene-text recognition with a 2D self-attention encoder and Transformer
//! decoder, built on a self-contained dense-tensor autodiff engine.
//!
//! The crate covers the full desk-scale workflow: synthetic text-image
//! generation, training with Adam and a cyclic learning rate, greedy
//! decoding, analytic parameter/FLOP accounting, and attention-map dumps.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod params;
pub mod pe;
pub mod pgm;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
