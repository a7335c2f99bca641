//! Joint sign recognition and translation transformer.
//!
//! The encoder gathers, for every frame, a contiguous window of similar
//! neighbours, encodes their relative offsets and compresses them with a
//! small temporal convolution stack; the compressed features serve as
//! attention keys and values. Attention scores at every site can add
//! disentangled content/position terms over a clamped relative-distance
//! table. A CTC head reads glosses off the encoder and an autoregressive
//! decoder emits words; both losses train jointly.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the two precisions used in practice.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod cptcn;
pub mod ctc;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gathering;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod translate;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Model32 = model::JointModel<f32>;
pub type Model64 = model::JointModel<f64>;
pub type Checkpoint32 = checkpoint::ModelCheckpoint<f32>;
pub type Checkpoint64 = checkpoint::ModelCheckpoint<f64>;
