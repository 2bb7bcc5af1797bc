//! Forward and backward passes for the primitive layers of the network.
//!
//! There is no autodiff graph. Each layer caches what its backward pass needs
//! during `forward` and consumes it in `backward`, which returns the input
//! gradient and accumulates parameter gradients into their [`GradPair`]s.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod pool;

pub use activation::{relu, softmax, softmax_backward, Relu, Softmax};
pub use batchnorm::{BatchNorm, BN_EPS, BN_MOMENTUM};
pub use conv::{conv2d_backward, conv2d_forward, dilate_kernel, Conv2d, ConvSpec};
pub use dense::Dense;
pub use pool::{AvgPool, MaxPool};

use crate::error::Result;
use crate::tensor::{GradPair, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub type ParamRefs<'a, T> = Vec<(String, &'a GradPair<T>)>;
pub type ParamMuts<'a, T> = Vec<(String, &'a mut GradPair<T>)>;
pub type BufferMuts<'a, T> = Vec<(String, &'a mut Tensor<T>)>;
pub type BufferRefs<'a, T> = Vec<(String, &'a Tensor<T>)>;

pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Gradient with respect to the input of the latest `forward` call.
    /// Parameter gradients are added to, never overwritten.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn params<'a>(&'a self, _prefix: &str, _out: &mut ParamRefs<'a, T>) {}

    fn params_mut<'a>(&'a mut self, _prefix: &str, _out: &mut ParamMuts<'a, T>) {}

    /// Non-learnable state that still belongs in a checkpoint.
    fn buffers<'a>(&'a self, _prefix: &str, _out: &mut BufferRefs<'a, T>) {}

    fn buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut BufferMuts<'a, T>) {}

    fn param_count(&self) -> usize {
        let mut out = Vec::new();
        self.params("", &mut out);
        out.iter().map(|(_, p)| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out.into_iter().for_each(|(_, p)| p.zero_grad());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn missing_cache(op: &'static str) -> crate::error::Error {
    crate::error::Error::shape(op, "backward called without a preceding forward")
}
