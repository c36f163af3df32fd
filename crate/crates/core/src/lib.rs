//! Desk-scale Transformer laboratory for studying where layer normalization
//! sits in a residual block.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common instantiations.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod instrument;
pub mod model;
pub mod norm;
pub mod scalar;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use autodiff::{fd_gradient, Tape, Var};
pub use error::{Error, Result};
pub use model::{init_parameters, ModelState, PlacementKind, PlacementStrategy, TokenBatch, TransformerConfig};
pub use norm::{NormKind, NormLayer};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::{train, Corpus, RunRecord, TrainConfig};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Model64 = ModelState<f64>;
pub type Model32 = ModelState<f32>;
