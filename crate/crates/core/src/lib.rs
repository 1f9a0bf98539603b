//! Reverse-mode autodiff, transformer building blocks and a cross-modal
//! fusion model that reconstructs a missing acoustic stream from vision and
//! language features.
//!
//! Everything here is `no_std` with `alloc`; IO, datasets and the training
//! loop live in the `mbkt` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adam;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod transfer;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use error::{Error, Result};
pub use fusion::{HeadMode, Modality, Stream, StreamSet};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use losses::{Label, LossTerms, LossValues, Objective};
pub use metrics::{compute_metrics, MetricsReport};
pub use model::{ForwardOptions, ForwardOutput, ModalityMode, Model, ModelConfig, SampleInputs};
pub use params::{ParamId, ParamStore, Session};
pub use tensor::Tensor;
pub use transfer::ConsistencyKind;
