use super::{missing_cache, Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

fn pooled_extent(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::shape(op, "window and stride must be positive"));
    }
    if k > size + 2 * pad {
        return Err(Error::shape(op, format!("window {k} exceeds padded input extent {}", size + 2 * pad)));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

/// Max pooling; padded cells never win.
pub struct MaxPool {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    argmax: Option<(Shape, Vec<u32>)>,
}

impl MaxPool {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        MaxPool { k, stride, pad, argmax: None }
    }

    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        Ok(Shape::new(
            s.n,
            s.c,
            pooled_extent("maxpool", s.h, self.k, self.stride, self.pad)?,
            pooled_extent("maxpool", s.w, self.k, self.stride, self.pad)?,
        ))
    }
}

impl<T: Scalar> Layer<T> for MaxPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        let os = self.output_shape(s)?;
        let mut out = Tensor::zeros(os);
        let mut arg = vec![0u32; os.len()];
        let pad = self.pad as isize;
        let mut o = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                let plane = x.plane(n, c);
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let (mut best, mut best_at) = (T::neg_infinity(), usize::MAX);
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let at = iy as usize * s.w + ix as usize;
                                if best_at == usize::MAX || plane[at] > best {
                                    best = plane[at];
                                    best_at = at;
                                }
                            }
                        }
                        out.data_mut()[o] = best;
                        arg[o] = best_at as u32;
                        o += 1;
                    }
                }
            }
        }
        self.argmax = (mode == Mode::Train).then_some((s, arg));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, arg) = self.argmax.as_ref().ok_or_else(|| missing_cache("maxpool"))?;
        if grad_out.len() != arg.len() {
            return Err(Error::ShapeMismatch { op: "maxpool backward", lhs: grad_out.shape(), rhs: *s });
        }
        let mut gx = Tensor::zeros(*s);
        let per_plane = grad_out.shape().plane();
        let plane = s.plane();
        for (o, (&g, &at)) in grad_out.data().iter().zip(arg).enumerate() {
            gx.data_mut()[(o / per_plane) * plane + at as usize] += g;
        }
        Ok(gx)
    }
}

/// Average pooling with stride equal to the window.
pub struct AvgPool {
    pub k: usize,
    input: Option<Shape>,
}

impl AvgPool {
    pub fn new(k: usize) -> Self {
        AvgPool { k, input: None }
    }

    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        Ok(Shape::new(
            s.n,
            s.c,
            pooled_extent("avgpool", s.h, self.k, self.k, 0)?,
            pooled_extent("avgpool", s.w, self.k, self.k, 0)?,
        ))
    }
}

impl<T: Scalar> Layer<T> for AvgPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        let os = self.output_shape(s)?;
        let inv = T::of(1.0 / (self.k * self.k) as f64);
        let mut out = Tensor::zeros(os);
        let mut o = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                let plane = x.plane(n, c);
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut acc = T::zero();
                        for ky in 0..self.k {
                            let row = (oy * self.k + ky) * s.w + ox * self.k;
                            acc = plane[row..row + self.k].iter().fold(acc, |a, &v| a + v);
                        }
                        out.data_mut()[o] = acc * inv;
                        o += 1;
                    }
                }
            }
        }
        self.input = (mode == Mode::Train).then_some(s);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.input.ok_or_else(|| missing_cache("avgpool"))?;
        let os = self.output_shape(s)?;
        if grad_out.shape() != os {
            return Err(Error::ShapeMismatch { op: "avgpool backward", lhs: grad_out.shape(), rhs: os });
        }
        let inv = T::of(1.0 / (self.k * self.k) as f64);
        let mut gx = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let g = grad_out.get(n, c, oy, ox) * inv;
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                let idx = gx.index(n, c, oy * self.k + ky, ox * self.k + kx);
                                gx.data_mut()[idx] += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn maxpool_halves_table_extents() {
        let mut pool = MaxPool::new(3, 2, 1);
        for (from, to) in [(56, 28), (28, 14), (14, 7)] {
            let x = Tensor::<f32>::full(Shape::new(1, 2, from, from), 0.75);
            let y = pool.forward(&x, Mode::Infer).unwrap();
            assert_eq!(y.shape(), Shape::new(1, 2, to, to));
            assert!(y.data().iter().all(|&v| v == 0.75));
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let mut pool = MaxPool::new(2, 2, 0);
        let y = pool.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let gx = pool.backward(&Tensor::full(y.shape(), 5.0)).unwrap();
        assert_eq!(gx.data(), &[0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn window_larger_than_input_is_an_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 5, 5));
        assert!(Layer::<f32>::forward(&mut AvgPool::new(7), &x, Mode::Infer).is_err());
        assert!(Layer::<f32>::forward(&mut MaxPool::new(8, 1, 1), &x, Mode::Infer).is_err());
    }

    #[test]
    fn avgpool_global_mean() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 7, 7), (0..49).map(f64::from).collect()).unwrap();
        let mut pool = AvgPool::new(7);
        let y = pool.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert!((y.data()[0] - 24.0).abs() < 1e-12);
        let gx = pool.backward(&Tensor::full(y.shape(), 49.0)).unwrap();
        assert!(gx.data().iter().all(|&g: &f64| (g - 1.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn maxpool_commutes_with_positive_scaling(
            v in prop::collection::vec(-5.0f64..5.0, 36..=36),
            scale in 0.01f64..100.0,
        ) {
            let x = Tensor::from_vec(Shape::new(1, 1, 6, 6), v).unwrap();
            let mut pool = MaxPool::new(3, 2, 1);
            let a = pool.forward(&x.scale(scale), Mode::Infer).unwrap();
            let b = pool.forward(&x, Mode::Infer).unwrap().scale(scale);
            prop_assert_eq!(a, b);
        }
    }
}
