//! Central-difference verification of explicit backward passes.
//!
//! The scalar probed is `L = Σ u ⊙ f(x)` for a fixed random `u`, so the
//! analytic gradient is whatever `backward(u)` produces.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Layer, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub epsilon: f64,
    /// Probe at most this many coordinates of each tensor (input and every
    /// parameter); `None` probes all of them.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// When set, a coordinate whose error exceeds this value is probed again
    /// with ε/2. If the two estimates disagree by more than a quarter of the
    /// value, a ReLU or max-pool switch lies inside the stencil and the
    /// coordinate is reported as a kink instead of counting towards the error.
    pub kink_tolerance: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { epsilon: 1e-4, max_coords_per_tensor: None, seed: 0x5eed, kink_tolerance: None }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    /// Largest error over the coordinates that were not classified as kinks.
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `input[12]` or `f1.conv.weight[3]`.
    pub worst: String,
    pub coords_checked: usize,
    pub kinks: Vec<String>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between analytic and central-difference gradients over
/// the input and all parameters.
pub fn backward_check(layer: &mut dyn Layer<f64>, input: &Tensor<f64>, epsilon: f64) -> Result<f64> {
    let opts = CheckOptions { epsilon, ..CheckOptions::default() };
    Ok(backward_check_with(layer, input, &opts)?.max_rel_error)
}

fn probe(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, at: &str) -> Result<Tensor<f64>> {
    let y = layer.forward(x, Mode::Train)?;
    if !y.all_finite() {
        return Err(Error::NonFinite(format!("gradient check probe at {at}")));
    }
    Ok(y)
}

/// `Σ u ⊙ (plus − minus) / 2ε`. Differencing before contracting keeps the
/// estimate free of cancellation in the full loss sum.
fn central_difference(u: &Tensor<f64>, plus: &Tensor<f64>, minus: &Tensor<f64>, eps: f64) -> f64 {
    let dot: f64 = u.data().iter().zip(plus.data().iter().zip(minus.data())).map(|(w, (p, m))| w * (p - m)).sum();
    dot / (2.0 * eps)
}

fn coords(len: usize, cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cap {
        Some(c) if c < len => {
            let mut v = sample(rng, len, c).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Which scalar a finite difference perturbs.
#[derive(Clone, Copy)]
enum Target {
    Input,
    Param(usize),
}

fn numeric_grad(
    layer: &mut dyn Layer<f64>,
    input: &Tensor<f64>,
    u: &Tensor<f64>,
    target: Target,
    i: usize,
    eps: f64,
    at: &str,
) -> Result<f64> {
    let eval = |layer: &mut dyn Layer<f64>, delta: f64| -> Result<Tensor<f64>> {
        match target {
            Target::Input => {
                let mut x = input.clone();
                x.data_mut()[i] += delta;
                probe(layer, &x, at)
            }
            Target::Param(pi) => {
                let orig = {
                    let mut ps = Vec::new();
                    layer.params_mut("", &mut ps);
                    let v = &mut ps[pi].1.value.data_mut()[i];
                    let orig = *v;
                    *v = orig + delta;
                    orig
                };
                let y = probe(layer, input, at);
                let mut ps = Vec::new();
                layer.params_mut("", &mut ps);
                ps[pi].1.value.data_mut()[i] = orig;
                y
            }
        }
    };
    let plus = eval(layer, eps)?;
    let minus = eval(layer, -eps)?;
    Ok(central_difference(u, &plus, &minus, eps))
}

pub fn backward_check_with(layer: &mut dyn Layer<f64>, input: &Tensor<f64>, opts: &CheckOptions) -> Result<CheckReport> {
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::Config(format!("epsilon {} outside [1e-7, 1e-3]", opts.epsilon)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let y = layer.forward(input, Mode::Train)?;
    let u = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    layer.zero_grad();
    let grad_x = layer.backward(&u)?;
    if !grad_x.all_finite() {
        return Err(Error::NonFinite("backward (input gradient)".into()));
    }
    let mut analytic: Vec<(String, Target, Tensor<f64>)> = vec![("input".into(), Target::Input, grad_x)];
    {
        let mut ps = Vec::new();
        layer.params("", &mut ps);
        for (pi, (name, p)) in ps.into_iter().enumerate() {
            analytic.push((name, Target::Param(pi), p.grad.clone()));
        }
    }

    let eps = opts.epsilon;
    let mut report = CheckReport { max_rel_error: 0.0, worst: String::new(), coords_checked: 0, kinks: Vec::new() };
    for (name, target, grad) in &analytic {
        for i in coords(grad.len(), opts.max_coords_per_tensor, &mut rng) {
            let at = format!("{name}[{i}]");
            let a = grad.data()[i];
            let g = numeric_grad(layer, input, &u, *target, i, eps, &at)?;
            let err = relative_error(a, g);
            report.coords_checked += 1;
            if let Some(tol) = opts.kink_tolerance.filter(|&t| err > t) {
                let half = numeric_grad(layer, input, &u, *target, i, eps / 2.0, &at)?;
                if relative_error(g, half) > tol / 4.0 {
                    report.kinks.push(at);
                    continue;
                }
            }
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = at;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ParamMuts, ParamRefs};
    use crate::tensor::{GradPair, Shape};

    /// y = x + offset, both operands differentiated.
    struct AddOffset {
        offset: GradPair<f64>,
    }

    impl Layer<f64> for AddOffset {
        fn forward(&mut self, x: &Tensor<f64>, _: Mode) -> Result<Tensor<f64>> {
            x.add(&self.offset.value)
        }

        fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
            self.offset.grad.add_assign(g)?;
            Ok(g.clone())
        }

        fn params<'a>(&'a self, _: &str, out: &mut ParamRefs<'a, f64>) {
            out.push(("offset".into(), &self.offset));
        }

        fn params_mut<'a>(&'a mut self, _: &str, out: &mut ParamMuts<'a, f64>) {
            out.push(("offset".into(), &mut self.offset));
        }
    }

    /// Deliberately wrong backward: reports twice the true gradient.
    struct Doubled;

    impl Layer<f64> for Doubled {
        fn forward(&mut self, x: &Tensor<f64>, _: Mode) -> Result<Tensor<f64>> {
            Ok(x.map(|v| v * v))
        }

        fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(g.scale(4.0))
        }
    }

    #[test]
    fn addition_is_exact() {
        let mut rng = rand::rng();
        let shape = Shape::new(2, 3, 4, 4);
        let mut layer = AddOffset { offset: GradPair::new(Tensor::randn(shape, 1.0, &mut rng)) };
        let x = Tensor::randn(shape, 1.0, &mut rng);
        let err = backward_check(&mut layer, &x, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
        // gradient of the sum is exactly one everywhere
        layer.zero_grad();
        layer.forward(&x, Mode::Train).unwrap();
        let gx = layer.backward(&Tensor::full(shape, 1.0)).unwrap();
        assert!(gx.data().iter().all(|&g| g == 1.0));
        assert!(layer.offset.grad.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn detects_wrong_backward() {
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 0.7);
        assert!(backward_check(&mut Doubled, &x, 1e-4).unwrap() > 0.4);
    }

    #[test]
    fn kinks_are_separated_from_errors() {
        use crate::layers::Relu;
        // first value sits inside the stencil of the ReLU switch
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![3e-5, 0.8, -0.6]).unwrap();
        let opts = CheckOptions { kink_tolerance: Some(1e-4), ..CheckOptions::default() };
        let plain = backward_check_with(&mut Relu::new(), &x, &CheckOptions::default()).unwrap();
        assert!(plain.max_rel_error > 0.1);
        let r = backward_check_with(&mut Relu::new(), &x, &opts).unwrap();
        assert_eq!(r.kinks, vec!["input[0]".to_string()]);
        assert!(r.max_rel_error < 1e-10);
        // a wrong gradient in a smooth region is still an error
        let y = Tensor::full(Shape::new(1, 1, 2, 2), 0.7);
        let r = backward_check_with(&mut Doubled, &y, &opts).unwrap();
        assert!(r.kinks.is_empty() && r.max_rel_error > 0.4);
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        let x = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        assert!(backward_check(&mut Doubled, &x, 1e-2).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
