//! Joint abstractive summarization of open-source license texts and
//! 23-term attitude classification, with the training, inference, and
//! evaluation pipeline behind the `lisum` CLI.
//!
//! All numeric code is generic over the scalar type via [`scalar::Scalar`]
//! (`f32` or `f64`); the aliases below pin the two concrete stacks.

pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod graph;
pub mod model;
pub mod scalar;
pub mod tokenizer;

mod nn;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f64 model stack: the precision used by the CLI, gradient checks, and
/// anything that must be bit-reproducible.
pub type Backbone64 = backbone::Backbone<f64>;
pub type LiSumModel64 = model::LiSumModel<f64>;

/// f32 model stack for memory-bound runs.
pub type Backbone32 = backbone::Backbone<f32>;
pub type LiSumModel32 = model::LiSumModel<f32>;
