//! Engine for the dilated inner residual CNN traffic-sign classifier.
//!
//! * [`tensor`]: rank-4 NCHW tensors and the GEMM kernels behind them.
//! * [`layers`]: convolution (regular and dilated), batch norm, pooling,
//!   dense, ReLU and softmax, each with an explicit backward pass.
//! * [`blocks`]: conventional, inner and dilated inner residual blocks.
//! * [`arch`]: closed-form receptive-field and parameter algebra with a
//!   brute-force receptive-field oracle.
//! * [`network`]: the full layer schedule, activation capture and checkpoints.
//! * [`trainer`]: loss, Adam, plateau learning-rate schedule, training loop
//!   and top-k evaluation.
//! * [`data`]: image folder / manifest loading, resizing and the synthetic
//!   sign generator.

pub mod arch;
pub mod blocks;
pub mod data;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Fill, GradPair, Scalar, Shape, Tensor};
