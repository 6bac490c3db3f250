//! Reverse-mode differentiable tensors for the gibr pipeline.
//!
//! A [`Graph`] is a tape: every operation applied to a tensor that descends
//! from a graph leaf records a backward closure. [`Graph::backward`] walks
//! the tape in reverse creation order, which is always a valid topological
//! order. Tensors with no graph attached are plain constants, so the same
//! model code runs with or without gradient bookkeeping.
//!
//! Values are generic over [`Real`] (`f32` for training throughput, `f64`
//! for gradient checks and property tests).

mod checkpoint;
mod error;
mod gradcheck;
mod kernels;
mod ops;
mod params;
mod real;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, NamedTensor,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use error::{DiffError, Result};
pub use gradcheck::{
    grad_check, grad_check_many, rel_error, GradCheckFailure, GradCheckReport, REL_ERROR_FLOOR,
};
pub use ops::norm::GROUP_NORM_EPS;
pub use ops::sample::SampleMode;
pub use params::{BoundParams, Param, ParamStore};
pub use real::{Precision, Real};
pub use tensor::{Graph, Tensor};
