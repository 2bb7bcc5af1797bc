use rand::Rng;

use super::{join, missing_cache, Layer, Mode, ParamMuts, ParamRefs};
use crate::error::{Error, Result};
use crate::tensor::{GradPair, Scalar, Shape, Tensor};

/// Fully connected layer over each sample's flattened (c, h, w) features.
/// Output shape is (n, out, 1, 1).
pub struct Dense<T> {
    weight: GradPair<T>,
    bias: GradPair<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = Tensor::randn(Shape::new(outputs, inputs, 1, 1), (2.0 / inputs as f64).sqrt(), rng);
        Self::from_parts(w, Tensor::zeros(Shape::new(outputs, 1, 1, 1))).expect("consistent shapes")
    }

    /// `weight` is (outputs, inputs, 1, 1), `bias` holds `outputs` values.
    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weight.shape();
        if s.h != 1 || s.w != 1 || bias.len() != s.n {
            return Err(Error::shape("dense", format!("weight {s} with {} bias values", bias.len())));
        }
        Ok(Dense { weight: GradPair::new(weight), bias: GradPair::new(bias), input: None })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape().c
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape().n
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        let (fin, fout) = (self.inputs(), self.outputs());
        if s.sample_len() != fin {
            return Err(Error::shape("dense", format!("input {s} has {} features, layer expects {fin}", s.sample_len())));
        }
        let mut out = vec![T::zero(); s.n * fout];
        T::gemm(s.n, fin, fout, x.data(), fin, 1, self.weight.value.data(), 1, fin, false, &mut out, fout);
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(self.bias.value.data()).for_each(|(v, &b)| *v += b);
        }
        let out = Tensor::from_vec(Shape::new(s.n, fout, 1, 1), out)?;
        out.check_finite("dense")?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("dense"))?;
        let (n, fin, fout) = (x.shape().n, self.inputs(), self.outputs());
        if grad_out.shape() != Shape::new(n, fout, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "dense backward",
                lhs: grad_out.shape(),
                rhs: Shape::new(n, fout, 1, 1),
            });
        }
        let g = grad_out.data();
        T::gemm(fout, n, fin, g, 1, fout, x.data(), fin, 1, true, self.weight.grad.data_mut(), fin);
        for row in g.chunks(fout) {
            self.bias.grad.data_mut().iter_mut().zip(row).for_each(|(b, &v)| *b += v);
        }
        let mut gx = vec![T::zero(); n * fin];
        T::gemm(n, fout, fin, g, fout, 1, self.weight.value.data(), fin, 1, false, &mut gx, fin);
        Tensor::from_vec(x.shape(), gx)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
