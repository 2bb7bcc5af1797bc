use super::{missing_cache, Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[derive(Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { output: None }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = relu(x);
        self.output = (mode == Mode::Train).then(|| y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.as_ref().ok_or_else(|| missing_cache("relu"))?;
        grad_out.zip_with(y, "relu backward", |g, y| if y > T::zero() { g } else { T::zero() })
    }
}

/// Softmax over each sample's full feature vector (c·h·w values).
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let len = x.shape().sample_len();
    for row in out.data_mut().chunks_mut(len) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

/// Input gradient of softmax given its output `y`: `y ⊙ (g − ⟨g, y⟩)` per sample.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch { op: "softmax backward", lhs: y.shape(), rhs: grad_out.shape() });
    }
    let len = y.shape().sample_len();
    let mut gx = grad_out.clone();
    for (g, yr) in gx.data_mut().chunks_mut(len).zip(y.data().chunks(len)) {
        let dot = g.iter().zip(yr).fold(T::zero(), |a, (&g, &y)| a + g * y);
        g.iter_mut().zip(yr).for_each(|(g, &y)| *g = y * (*g - dot));
    }
    Ok(gx)
}

#[derive(Default)]
pub struct Softmax<T> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Softmax<T> {
    pub fn new() -> Self {
        Softmax { output: None }
    }
}

impl<T: Scalar> Layer<T> for Softmax<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = softmax(x);
        y.check_finite("softmax")?;
        self.output = (mode == Mode::Train).then(|| y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.as_ref().ok_or_else(|| missing_cache("softmax"))?;
        softmax_backward(y, grad_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    #[test]
    fn relu_zeroes_negatives() {
        let x = Tensor::<f32>::full(Shape::new(2, 3, 4, 4), -0.5);
        assert_eq!(relu(&x).max_abs(), 0.0);
    }

    #[test]
    fn equal_logits_give_uniform_probabilities() {
        let y = softmax(&Tensor::<f64>::full(Shape::new(1, 43, 1, 1), 2.5));
        assert!(y.data().iter().all(|&p| (p - 1.0 / 43.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 3, 1, 1), vec![1000.0, 0.0, -1000.0]).unwrap();
        let y = softmax(&x);
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn relu_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..50)) {
            let x = Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v).unwrap();
            prop_assert_eq!(relu(&relu(&x)), relu(&x));
        }

        #[test]
        fn softmax_rows_are_positive_and_normalized(
            v in prop::collection::vec(-30.0f32..30.0, 6..=6)
        ) {
            let x = Tensor::from_vec(Shape::new(2, 3, 1, 1), v).unwrap();
            let y = softmax(&x);
            for n in 0..2 {
                let row = y.sample(n);
                prop_assert!(row.iter().all(|&p| p > 0.0));
                prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
