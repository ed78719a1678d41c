//! Image-text feature alignment at desk scale.
//!
//! A self-contained tensor/autodiff core plus the three TFANet alignment
//! stages — multiscale linear cross-attention (MLAM), cross-modal selective
//! scanning (CFSM) and word-guided mask deepening (WFDM) — wired into a small
//! referring-segmentation model with a synthetic task, a training/eval
//! harness, binary checkpoints and a scaling benchmark for the linear
//! attention claim.
//!
//! Everything numeric is generic over [`Real`] (`f32`/`f64`). The model and
//! training paths use `f64`; benchmarks time the `f32` instantiation.

pub mod alloc;
pub mod bench;
pub mod cfsm;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod mlam;
pub mod model;
pub mod optim;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod wfdm;

pub use error::{Error, Result};
pub use param::{Parameter, ParameterStore};
pub use scalar::Real;
pub use tensor::{no_grad, Tensor};

/// f64 tensors: model/training precision.
pub type Tensor64 = Tensor<f64>;
/// f32 tensors: benchmark precision.
pub type Tensor32 = Tensor<f32>;
/// f64 parameter registry used by the model paths.
pub type ParameterStore64 = ParameterStore<f64>;
