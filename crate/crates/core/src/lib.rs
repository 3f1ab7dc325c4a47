//! Joint generation of translations and their dependency structure.
//!
//! The decoder family implemented here predicts a target sentence together
//! with its labeled dependency tree as one sequence of transitions
//! (subwords plus `LA:label` / `RA:label` arc tokens). The partially built
//! graph is re-encoded at every step, either through a gated labeled GCN
//! stacked above the embeddings or through an attention head restricted to
//! each token's parents, on top of a decoder whose self-attention may look
//! in both directions over the generated prefix.
//!
//! Core math is generic over the scalar type (`f32` for training and
//! inference, `f64` for finite-difference gradient checks); see [`scalar`]
//! and the `TensorF` / `TensorD` aliases.

pub mod checkpoint;
pub mod decoding;
pub mod depgraph;
pub mod gradcheck;
pub mod labels;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synthlang;
pub mod tensor;
pub mod testgen;
pub mod training;
pub mod transitions;

pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default tensor type used by the model.
pub type TensorF = tensor::Tensor<f32>;
/// Double-precision tensor, used by the gradient-check suites.
pub type TensorD = tensor::Tensor<f64>;
