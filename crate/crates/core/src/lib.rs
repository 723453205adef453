//! Contrastive dictionary learning on a small reverse-mode autodiff core.
//!
//! Everything is generic over the scalar type; `f64` aliases are the default
//! for tests and the CLI, `f32` aliases mirror the checkpoint payload width.

// `!(x > 0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod engine;
pub mod eval;
mod error;
pub mod gradcheck;
pub mod harness;
mod scalar;
pub mod shuffled_bn;

pub use contrastive::{EndToEndState, KeyQueue, Mechanism, MechanismKind, MemoryBank, MemoryBankState, MocoState, StepMetrics};
pub use data::Dataset;
pub use encoder::{Encoder, EncoderConfig};
pub use engine::{Tape, Tensor};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Encoder64 = Encoder<f64>;
pub type Encoder32 = Encoder<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
