//! Language-conditioned bimanual pick-and-place prediction on a synthetic
//! cloth-folding world.
//!
//! The crate provides:
//! - a small `f64` tensor library with reverse-mode autodiff ([`tensor`]),
//! - toy text/image transformer encoders with LoRA adapters ([`encoders`],
//!   [`lora`]),
//! - temporal-context fusion and convolutional heatmap decoding ([`fusion`],
//!   [`decoder`]),
//! - Gaussian-mixture heatmap targets and the training loss ([`loss`]),
//! - the FoldWorld simulator and dataset formats ([`sim`]),
//! - training, evaluation metrics and introspection tooling ([`train`],
//!   [`metrics`], [`introspect`]).

pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod imgio;
pub mod introspect;
pub mod lora;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, TensorId};
