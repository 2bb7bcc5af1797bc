use super::{join, missing_cache, BufferMuts, BufferRefs, Layer, Mode, ParamMuts, ParamRefs};
use crate::error::{Error, Result};
use crate::tensor::{GradPair, Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running moment at each train-mode step.
pub const BN_MOMENTUM: f64 = 0.9;

struct Cache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalization with running moments for inference.
/// Zero-variance channels are guarded by `eps` instead of rejected.
pub struct BatchNorm<T> {
    gamma: GradPair<T>,
    beta: GradPair<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    momentum: f64,
    eps: f64,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(channels, 1, 1, 1);
        BatchNorm {
            gamma: GradPair::new(Tensor::full(s, T::one())),
            beta: GradPair::new(Tensor::zeros(s)),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::full(s, T::one()),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma_mut(&mut self) -> &mut GradPair<T> {
        &mut self.gamma
    }

    pub fn beta_mut(&mut self) -> &mut GradPair<T> {
        &mut self.beta
    }

    pub fn running_mean(&self) -> &Tensor<T> {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor<T> {
        &self.running_var
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn check_channels(&self, s: Shape) -> Result<()> {
        if s.c != self.channels() {
            return Err(Error::shape(
                "batchnorm",
                format!("input {s} has {} channels, layer has {}", s.c, self.channels()),
            ));
        }
        Ok(())
    }

    fn moments(x: &Tensor<T>, c: usize) -> (f64, f64) {
        let s = x.shape();
        let count = (s.n * s.plane()) as f64;
        let mut sum = 0.0;
        for n in 0..s.n {
            sum += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
        }
        (mean, sq / count)
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        self.check_channels(s)?;
        let p = s.plane();
        let mut out = Tensor::zeros(s);
        match mode {
            Mode::Train => {
                let count = s.n * p;
                let mut xhat = Tensor::zeros(s);
                let mut inv_stds = Vec::with_capacity(s.c);
                for c in 0..s.c {
                    let (mean, var) = Self::moments(x, c);
                    let inv_std = 1.0 / (var + self.eps).sqrt();
                    let (m, is) = (T::of(mean), T::of(inv_std));
                    let (g, b) = (self.gamma.value.data()[c], self.beta.value.data()[c]);
                    for n in 0..s.n {
                        let start = x.index(n, c, 0, 0);
                        let src = &x.data()[start..start + p];
                        let xh = &mut xhat.data_mut()[start..start + p];
                        for (h, &v) in xh.iter_mut().zip(src) {
                            *h = (v - m) * is;
                        }
                        let dst = &mut out.data_mut()[start..start + p];
                        for (d, &h) in dst.iter_mut().zip(&xhat.data()[start..start + p]) {
                            *d = g * h + b;
                        }
                    }
                    let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
                    let mo = self.momentum;
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = T::of(mo * rm.as_f64() + (1.0 - mo) * mean);
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = T::of(mo * rv.as_f64() + (1.0 - mo) * unbiased);
                    inv_stds.push(inv_std);
                }
                self.cache = Some(Cache { xhat, inv_std: inv_stds });
            }
            Mode::Infer => {
                for c in 0..s.c {
                    let inv_std = T::of(1.0 / (self.running_var.data()[c].as_f64() + self.eps).sqrt());
                    let scale = self.gamma.value.data()[c] * inv_std;
                    let shift = self.beta.value.data()[c] - self.running_mean.data()[c] * scale;
                    for n in 0..s.n {
                        let start = x.index(n, c, 0, 0);
                        let src = &x.data()[start..start + p];
                        for (d, &v) in out.data_mut()[start..start + p].iter_mut().zip(src) {
                            *d = v * scale + shift;
                        }
                    }
                }
                self.cache = None;
            }
        }
        out.check_finite("batchnorm")?;
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("batchnorm"))?;
        let s = grad_out.shape();
        if s != cache.xhat.shape() {
            return Err(Error::ShapeMismatch { op: "batchnorm backward", lhs: s, rhs: cache.xhat.shape() });
        }
        let p = s.plane();
        let count = (s.n * p) as f64;
        let mut gx = Tensor::zeros(s);
        for c in 0..s.c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for n in 0..s.n {
                let start = grad_out.index(n, c, 0, 0);
                let dy = &grad_out.data()[start..start + p];
                let xh = &cache.xhat.data()[start..start + p];
                for (&d, &h) in dy.iter().zip(xh) {
                    sum_dy += d.as_f64();
                    sum_dy_xhat += (d * h).as_f64();
                }
            }
            self.gamma.grad.data_mut()[c] += T::of(sum_dy_xhat);
            self.beta.grad.data_mut()[c] += T::of(sum_dy);
            let k = T::of(self.gamma.value.data()[c].as_f64() * cache.inv_std[c]);
            let (mean_dy, mean_dy_xhat) = (T::of(sum_dy / count), T::of(sum_dy_xhat / count));
            for n in 0..s.n {
                let start = grad_out.index(n, c, 0, 0);
                let dy = &grad_out.data()[start..start + p];
                let xh = &cache.xhat.data()[start..start + p];
                for ((g, &d), &h) in gx.data_mut()[start..start + p].iter_mut().zip(dy).zip(xh) {
                    *g = k * (d - mean_dy - h * mean_dy_xhat);
                }
            }
        }
        gx.check_finite("batchnorm backward")?;
        Ok(gx)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut BufferRefs<'a, T>) {
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BufferMuts<'a, T>) {
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = Tensor::<f64>::randn(Shape::new(64, 2, 8, 8), 1.0, &mut rng);
        // standardize each channel exactly
        let mut x = raw.clone();
        for c in 0..2 {
            let (mean, var) = BatchNorm::<f64>::moments(&raw, c);
            for n in 0..64 {
                let start = x.index(n, c, 0, 0);
                for v in &mut x.data_mut()[start..start + 64] {
                    *v = (*v - mean) / var.sqrt();
                }
            }
        }
        let y = BatchNorm::new(2).forward(&x, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-3);
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(Shape::new(4, 3, 5, 5), 2.0, &mut rng);
        let mut bn = BatchNorm::new(3);
        bn.gamma_mut().value.fill(0.0);
        bn.beta_mut().value.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        for mode in [Mode::Train, Mode::Infer] {
            let y = bn.forward(&x, mode).unwrap();
            for n in 0..4 {
                assert!(y.plane(n, 0).iter().all(|&v| v == 0.5));
                assert!(y.plane(n, 1).iter().all(|&v| v == -1.0));
                assert!(y.plane(n, 2).iter().all(|&v| v == 2.0));
            }
        }
    }

    #[test]
    fn constant_channel_is_eps_guarded() {
        let x = Tensor::<f64>::full(Shape::new(3, 1, 4, 4), 7.25);
        let mut bn = BatchNorm::new(1);
        bn.beta_mut().value.fill(0.3);
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));

        // batch of one 1x1 pixel: variance is zero, still finite
        let y = bn.forward(&Tensor::full(Shape::new(1, 1, 1, 1), 4.0), Mode::Train).unwrap();
        assert_eq!(y.data(), &[0.3]);
    }

    #[test]
    fn running_moments_follow_exponential_average() {
        let x = Tensor::<f64>::from_vec(Shape::new(2, 1, 1, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut bn = BatchNorm::new(1);
        bn.forward(&x, Mode::Train).unwrap();
        // mean 4, unbiased variance 20/3
        assert!((bn.running_mean().data()[0] - 0.1 * 4.0).abs() < 1e-12);
        assert!((bn.running_var().data()[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
        assert!(bn.running_var().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn infer_mode_uses_running_moments_only() {
        let mut bn = BatchNorm::<f64>::new(1);
        let a = Tensor::full(Shape::new(1, 1, 2, 2), 3.0);
        let b = Tensor::from_vec(Shape::new(2, 1, 2, 2), vec![3.0, 3.0, 3.0, 3.0, -9.0, 1.0, 0.0, 12.0]).unwrap();
        let ya = bn.forward(&a, Mode::Infer).unwrap();
        let yb = bn.forward(&b, Mode::Infer).unwrap();
        assert_eq!(ya.sample(0), yb.sample(0));
        let expect = 3.0 / (1.0 + BN_EPS).sqrt();
        assert!((ya.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut bn = BatchNorm::<f32>::new(2);
        assert!(bn.forward(&Tensor::zeros(Shape::new(1, 3, 2, 2)), Mode::Train).is_err());
    }
}
