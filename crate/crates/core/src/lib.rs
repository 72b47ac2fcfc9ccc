//! Action-guided attention for sequence action anticipation.
//!
//! A self-contained CPU implementation: a small reverse-mode autodiff engine
//! ([`tensor`]), the parameterized blocks ([`layers`]), the recurrent
//! attention cell ([`model`]), a synthetic anticipation task and embedding
//! file format ([`data`]), supervised training ([`train`]), recall-oriented
//! metrics ([`metrics`]), and post-training analyses ([`analysis`]).
//!
//! The numeric core is generic over the scalar type; the aliases below pin
//! the f64 instantiation the pipeline modules work with.

pub mod analysis;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{AgaError, Result};
pub use scalar::Scalar;

/// f64 tensor, the pipeline default.
pub type Tensor = tensor::Tensor<f64>;
/// f64 computation graph.
pub type Graph = tensor::Graph<f64>;
/// f64 forward-pass session.
pub type Session = layers::Session<f64>;
/// f64 model.
pub type AgaModel = model::AgaModel<f64>;
/// f64 recurrent state.
pub type AgaState = model::AgaState<f64>;
/// f64 step output.
pub type StepOutput = model::StepOutput<f64>;
/// Probability vector over the action classes.
pub type PredictionDistribution = Vec<f64>;
