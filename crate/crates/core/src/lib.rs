//! Dense and Soft Mixture-of-Adapters for a frozen spectrogram transformer.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`params`], [`gradcheck`]: a small deterministic
//!   reverse-mode autodiff engine over `f64` matrices.
//! - [`adapters`]: the bottleneck adapter used as an expert.
//! - [`moa`]: router-gated Dense-MoA and slot-based Soft-MoA blocks plus the
//!   routing analyses built on their traces.
//! - [`encoder`]: patch embedding, pre-norm transformer layers with parallel
//!   adapter insertion, classification head and checkpoints.
//! - [`training`]: AdamW with cosine annealing over the trainable partition.
//! - [`data`]: synthetic spectrogram tasks and the dataset file format.
//! - [`flops`]: analytic multiply-add model of the adapter path.

pub mod adapters;
pub mod data;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod moa;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Scope, Var};
pub use params::{ParamId, ParamRegistry};
pub use tensor::Tensor;
