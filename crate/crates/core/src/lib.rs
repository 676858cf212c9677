//! Numerics for recurrent CSI feedback compression.
//!
//! The crate is `no_std` (alloc only) and carries the pure algorithmic side
//! of the laboratory: a dense tensor type with reverse-mode automatic
//! differentiation, an Adam optimizer, the layer primitives and the three
//! encoder/decoder architectures (CsiNet, RecCsiNet, PR-RecCsiNet), a sparse
//! multipath channel generator with temporal evolution, codeword
//! quantization with bit packing, and the NMSE / sequence-loss metrics.
//!
//! File formats, dataset persistence, the training loop and the CLI live in
//! the companion `csi-lab` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod arch;
pub mod channel;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use arch::{ArchitectureKind, ArchitectureSpec, Model, ModelDims};
pub use error::CsiError;
pub use graph::{Graph, NodeId};
pub use params::{ParamId, ParameterSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T> = core::result::Result<T, CsiError>;
