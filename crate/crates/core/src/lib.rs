//! Semi-supervised vehicle re-identification under haze.
//!
//! The crate bundles a small reverse-mode autodiff engine, the atmospheric
//! scattering model and priors used to supervise dehazing, a procedural
//! vehicle dataset, the dual-encoder network, its losses, the staged
//! trainer, and retrieval evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod haze;
pub mod kernels;
pub mod loss;
pub mod net;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, PrimitiveKind};
pub use tensor::Tensor;
