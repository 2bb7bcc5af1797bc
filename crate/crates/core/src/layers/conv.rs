//! 2-D convolution, regular and dilated.
//!
//! Both forward and backward lower the convolution to a matrix product over a
//! patch matrix (one row per (input channel, tap row, tap column), one column
//! per output pixel). A dilated kernel samples the input every `dilation`
//! pixels, so it performs exactly the same number of multiply-adds as a
//! regular kernel of the same size while covering a wider extent.

use rand::Rng;
use rayon::prelude::*;

use super::{join, missing_cache, Layer, Mode, ParamMuts, ParamRefs};
use crate::error::{Error, Result};
use crate::tensor::{GradPair, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    /// Kernel height and width.
    pub k: usize,
    /// Spacing between taps; 1 is a regular convolution.
    pub dilation: usize,
    pub stride: usize,
    /// Zero padding added on every side.
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvSpec { k, dilation: 1, stride: 1, pad: 0, c_in, c_out }
    }

    /// Stride-1 convolution padded so the output keeps the input's extent.
    /// Requires an odd `k`.
    pub fn same(c_in: usize, c_out: usize, k: usize, dilation: usize) -> Self {
        ConvSpec { k, dilation, stride: 1, pad: (k - 1) * dilation / 2, c_in, c_out }
    }

    pub fn with_dilation(self, dilation: usize) -> Self {
        ConvSpec { dilation, ..self }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        ConvSpec { stride, ..self }
    }

    pub fn with_pad(self, pad: usize) -> Self {
        ConvSpec { pad, ..self }
    }

    /// Side of the input window one output pixel sees: `k + (k-1)(r-1)`.
    pub fn effective_extent(&self) -> usize {
        self.k + (self.k - 1) * (self.dilation - 1)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in, self.k, self.k)
    }

    pub fn weight_count(&self) -> usize {
        self.k * self.k * self.c_in * self.c_out
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.dilation == 0 || self.stride == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(Error::shape("conv2d", format!("invalid spec {self:?}")));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let ext = self.effective_extent();
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ext > ph || ext > pw {
            return Err(Error::shape(
                "conv2d",
                format!("effective kernel extent {ext} exceeds padded input {ph}x{pw}"),
            ));
        }
        Ok(((ph - ext) / self.stride + 1, (pw - ext) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

struct Geometry {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

/// Valid output columns `[lo, hi)` for a tap at horizontal offset `off`
/// (stride 1 only).
fn valid_span(off: isize, wo: usize, w: usize) -> (usize, usize) {
    let lo = ((-off).max(0) as usize).min(wo);
    let hi = ((w as isize - off).max(0) as usize).clamp(lo, wo);
    (lo, hi)
}

fn im2col<T: Scalar>(x: &[T], spec: &ConvSpec, g: &Geometry, col: &mut [T]) {
    let (k, r, s, pad) = (spec.k, spec.dilation as isize, spec.stride, spec.pad as isize);
    let p = g.ho * g.wo;
    for ci in 0..spec.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                let off_x = kx as isize * r - pad;
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * s) as isize + ky as isize * r - pad;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if s == 1 {
                        let (lo, hi) = valid_span(off_x, g.wo, g.w);
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if hi > lo {
                            let start = (lo as isize + off_x) as usize;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + off_x;
                            *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto the input layout.
fn col2im<T: Scalar>(col: &[T], spec: &ConvSpec, g: &Geometry, x: &mut [T]) {
    let (k, r, s, pad) = (spec.k, spec.dilation as isize, spec.stride, spec.pad as isize);
    let p = g.ho * g.wo;
    for ci in 0..spec.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                let off_x = kx as isize * r - pad;
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ky as isize * r - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if s == 1 {
                        let (lo, hi) = valid_span(off_x, g.wo, g.w);
                        if hi == lo {
                            continue;
                        }
                        let start = (lo as isize + off_x) as usize;
                        dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]).for_each(|(d, v)| *d += *v);
                    } else {
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * s) as isize + off_x;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_operands<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let xs = x.shape();
    if xs.c != spec.c_in {
        return Err(Error::shape("conv2d", format!("input {xs} has {} channels, spec expects {}", xs.c, spec.c_in)));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch { op: "conv2d weight", lhs: w.shape(), rhs: spec.weight_shape() });
    }
    let (ho, wo) = spec.output_hw(xs.h, xs.w)?;
    Ok(Geometry { h: xs.h, w: xs.w, ho, wo })
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = check_operands(x, w, spec)?;
    if let Some(b) = bias {
        if b.len() != spec.c_out {
            return Err(Error::shape("conv2d bias", format!("{} values for {} channels", b.len(), spec.c_out)));
        }
    }
    let out_shape = Shape::new(x.shape().n, spec.c_out, g.ho, g.wo);
    let (kk, p) = (spec.patch_rows(), g.ho * g.wo);
    let pointwise = spec.is_pointwise();
    let mut out = vec![T::zero(); out_shape.len()];
    out.par_chunks_mut(spec.c_out * p).enumerate().for_each_init(
        || vec![T::zero(); if pointwise { 0 } else { kk * p }],
        |col, (i, o)| {
            let xs = x.sample(i);
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, spec, &g, col);
                col
            };
            T::gemm(spec.c_out, kk, p, w.data(), kk, 1, src, p, 1, false, o, p);
            if let Some(b) = bias {
                for (co, plane) in o.chunks_mut(p).enumerate() {
                    let bv = b.data()[co];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        },
    );
    let out = Tensor::from_vec(out_shape, out)?;
    out.check_finite("conv2d_forward")?;
    Ok(out)
}

/// Samples per independent weight-gradient partial. Partials are reduced in a
/// fixed order, so results do not depend on the thread count.
const GRAD_GROUP: usize = 4;

/// Returns `(grad_x, grad_w)` for the convolution of `x` with `w`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = check_operands(x, w, spec)?;
    let expect = Shape::new(x.shape().n, spec.c_out, g.ho, g.wo);
    if grad_out.shape() != expect {
        return Err(Error::ShapeMismatch { op: "conv2d_backward", lhs: grad_out.shape(), rhs: expect });
    }
    let (kk, p, c_out) = (spec.patch_rows(), g.ho * g.wo, spec.c_out);
    let sample_len = x.shape().sample_len();
    let pointwise = spec.is_pointwise();
    let mut grad_x = vec![T::zero(); x.len()];
    let partials: Vec<Vec<T>> = grad_x
        .par_chunks_mut(GRAD_GROUP * sample_len)
        .enumerate()
        .map(|(group, gx_chunk)| {
            let mut gw = vec![T::zero(); w.len()];
            let scratch = if pointwise { 0 } else { kk * p };
            let (mut col, mut gcol) = (vec![T::zero(); scratch], vec![T::zero(); scratch]);
            for (j, gx) in gx_chunk.chunks_mut(sample_len).enumerate() {
                let i = group * GRAD_GROUP + j;
                let (xs, go) = (x.sample(i), grad_out.sample(i));
                let src: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, spec, &g, &mut col);
                    &col
                };
                T::gemm(c_out, p, kk, go, p, 1, src, 1, p, true, &mut gw, kk);
                if pointwise {
                    T::gemm(kk, c_out, p, w.data(), 1, kk, go, p, 1, false, gx, p);
                } else {
                    T::gemm(kk, c_out, p, w.data(), 1, kk, go, p, 1, false, &mut gcol, p);
                    col2im(&gcol, spec, &g, gx);
                }
            }
            gw
        })
        .collect();
    let mut grad_w = vec![T::zero(); w.len()];
    for part in &partials {
        grad_w.iter_mut().zip(part).for_each(|(a, b)| *a += *b);
    }
    let grad_x = Tensor::from_vec(x.shape(), grad_x)?;
    let grad_w = Tensor::from_vec(w.shape(), grad_w)?;
    grad_x.check_finite("conv2d_backward")?;
    Ok((grad_x, grad_w))
}

/// Expands a k×k kernel to its k_eff×k_eff zero-stuffed equivalent: original
/// taps land on multiples of `dilation`, zeros everywhere else.
pub fn dilate_kernel<T: Scalar>(w: &Tensor<T>, dilation: usize) -> Tensor<T> {
    let s = w.shape();
    assert!(dilation >= 1 && s.h == s.w, "dilate_kernel needs a square kernel and dilation >= 1");
    let ext = s.h + (s.h - 1) * (dilation - 1);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ext, ext));
    for o in 0..s.n {
        for i in 0..s.c {
            for ky in 0..s.h {
                for kx in 0..s.w {
                    let idx = out.index(o, i, ky * dilation, kx * dilation);
                    out.data_mut()[idx] = w.get(o, i, ky, kx);
                }
            }
        }
    }
    out
}

pub struct Conv2d<T> {
    spec: ConvSpec,
    weight: GradPair<T>,
    bias: Option<GradPair<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights (std = sqrt(2 / fan_in)), zero bias.
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, bias: bool, rng: &mut R) -> Self {
        let fan_in = (spec.c_in * spec.k * spec.k) as f64;
        let weight = Tensor::randn(spec.weight_shape(), (2.0 / fan_in).sqrt(), rng);
        let bias = bias.then(|| Tensor::zeros(Shape::new(spec.c_out, 1, 1, 1)));
        Self::from_parts(spec, weight, bias).expect("shapes derived from spec")
    }

    pub fn from_parts(spec: ConvSpec, weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        if weight.shape() != spec.weight_shape() {
            return Err(Error::ShapeMismatch { op: "conv2d weight", lhs: weight.shape(), rhs: spec.weight_shape() });
        }
        if let Some(b) = &bias {
            if b.len() != spec.c_out {
                return Err(Error::shape("conv2d bias", format!("{} values for {} channels", b.len(), spec.c_out)));
            }
        }
        Ok(Conv2d { spec, weight: GradPair::new(weight), bias: bias.map(GradPair::new), input: None })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight(&self) -> &GradPair<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut GradPair<T> {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&GradPair<T>> {
        self.bias.as_ref()
    }

    /// Input of the latest train-mode forward.
    pub fn cached_input(&self) -> Option<&Tensor<T>> {
        self.input.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = conv2d_forward(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value), &self.spec)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let (gx, gw) = conv2d_backward(x, &self.weight.value, &self.spec, grad_out)?;
        self.weight.grad.add_assign(&gw)?;
        if let Some(b) = &mut self.bias {
            let s = grad_out.shape();
            let gb = b.grad.data_mut();
            for n in 0..s.n {
                for (c, g) in gb.iter_mut().enumerate() {
                    *g += grad_out.plane(n, c).iter().fold(T::zero(), |a, &v| a + v);
                }
            }
        }
        Ok(gx)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Textbook six-loop convolution, used as an independent oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let s = x.shape();
        let (ho, wo) = spec.output_hw(s.h, s.w).unwrap();
        let mut out = Tensor::zeros(Shape::new(s.n, spec.c_out, ho, wo));
        for n in 0..s.n {
            for co in 0..spec.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..spec.c_in {
                            for ky in 0..spec.k {
                                for kx in 0..spec.k {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                        acc += x.get(n, ci, iy as usize, ix as usize) * w.get(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        let idx = out.index(n, co, oy, ox);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn ones(n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::full(Shape::new(n, c, h, w), 1.0)
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(Shape::new(2, 1, 5, 4), 1.0, &mut rng);
        let y = conv2d_forward(&x, &ones(1, 1, 1, 1), None, &ConvSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn summation_examples() {
        let y = conv2d_forward(&ones(1, 1, 3, 3), &ones(1, 1, 3, 3), None, &ConvSpec::new(1, 1, 3)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);

        let spec = ConvSpec::new(1, 1, 3).with_dilation(2);
        let y = conv2d_forward(&ones(1, 1, 5, 5), &ones(1, 1, 3, 3), None, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 5 - (3 - 1) * 2, 5 - (3 - 1) * 2));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn unpadded_extent_shrinks_by_k_minus_one_times_r() {
        for (k, r) in [(3, 1), (3, 2), (3, 3), (5, 2)] {
            let spec = ConvSpec::new(1, 1, k).with_dilation(r);
            assert_eq!(spec.output_hw(20, 20).unwrap(), (20 - (k - 1) * r, 20 - (k - 1) * r));
        }
    }

    #[test]
    fn same_padding_keeps_extent() {
        for r in 1..=3 {
            assert_eq!(ConvSpec::same(4, 4, 3, r).output_hw(14, 14).unwrap(), (14, 14));
        }
    }

    #[test]
    fn extent_violation_is_an_error() {
        let spec = ConvSpec::new(1, 1, 3).with_dilation(3);
        let err = conv2d_forward(&ones(1, 1, 6, 6), &ones(1, 1, 3, 3), None, &spec).unwrap_err();
        assert!(err.to_string().contains("extent 7"), "{err}");
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        assert!(conv2d_forward(&ones(1, 2, 5, 5), &ones(1, 1, 3, 3), None, &ConvSpec::new(1, 1, 3)).is_err());
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let specs = [
            ConvSpec::same(3, 4, 3, 1),
            ConvSpec::same(3, 4, 3, 2),
            ConvSpec::same(3, 4, 3, 3),
            ConvSpec::new(3, 2, 3).with_stride(2).with_pad(1),
            ConvSpec::new(3, 2, 3).with_dilation(2).with_stride(2),
            ConvSpec::new(3, 5, 1),
        ];
        for spec in specs {
            let x = Tensor::<f64>::randn(Shape::new(2, 3, 9, 8), 1.0, &mut rng);
            let w = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
            let got = conv2d_forward(&x, &w, None, &spec).unwrap();
            let want = naive_conv(&x, &w, &spec);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{spec:?}");

            let got32 = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), None, &spec).unwrap();
            assert!(got32.cast::<f64>().max_abs_diff(&want).unwrap() < 1e-4, "{spec:?}");
        }
    }

    #[test]
    fn taps_beyond_small_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for hw in [1, 2, 3] {
            let spec = ConvSpec::same(2, 2, 3, 3);
            let x = Tensor::<f64>::randn(Shape::new(1, 2, hw, hw), 1.0, &mut rng);
            let w = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
            let got = conv2d_forward(&x, &w, None, &spec).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &w, &spec)).unwrap() < 1e-12);
            let (gx, _) = conv2d_backward(&x, &w, &spec, &Tensor::full(got.shape(), 1.0)).unwrap();
            assert_eq!(gx.shape(), x.shape());
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::same(2, 3, 3, 2);
        let x = Tensor::<f64>::randn(Shape::new(1, 2, 6, 6), 1.0, &mut rng);
        let w = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
        let (gx, gw) = conv2d_backward(&x, &w, &spec, &Tensor::zeros(Shape::new(1, 3, 6, 6))).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert_eq!(gw.max_abs(), 0.0);
    }

    #[test]
    fn scalar_chain_rule() {
        let spec = ConvSpec::new(1, 1, 1);
        let x = Tensor::full(Shape::new(1, 1, 1, 1), 3.0);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), -2.0);
        let g = Tensor::full(Shape::new(1, 1, 1, 1), 0.5);
        let (gx, gw) = conv2d_backward(&x, &w, &spec, &g).unwrap();
        assert_eq!(gx.data(), &[-2.0 * 0.5]);
        assert_eq!(gw.data(), &[3.0 * 0.5]);
    }

    #[test]
    fn backward_is_the_adjoint_of_forward() {
        // <conv(x, w), g> = <x, grad_x> = <w, grad_w> for a bilinear map
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in [ConvSpec::same(2, 3, 3, 3), ConvSpec::new(2, 3, 3).with_stride(2).with_pad(1)] {
            let x = Tensor::<f64>::randn(Shape::new(5, 2, 7, 7), 1.0, &mut rng);
            let w = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
            let y = conv2d_forward(&x, &w, None, &spec).unwrap();
            let g = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
            let (gx, gw) = conv2d_backward(&x, &w, &spec, &g).unwrap();
            let lhs = y.mul(&g).unwrap().sum();
            assert!((lhs - x.mul(&gx).unwrap().sum()).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - w.mul(&gw).unwrap().sum()).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn dilate_kernel_examples() {
        let w = Tensor::<f64>::from_vec(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(dilate_kernel(&w, 1), w);

        let d2 = dilate_kernel(&w, 2);
        assert_eq!(d2.shape(), Shape::new(1, 1, 5, 5));
        for y in 0..5 {
            for x in 0..5 {
                let expect = if y % 2 == 0 && x % 2 == 0 { w.get(0, 0, y / 2, x / 2) } else { 0.0 };
                assert_eq!(d2.get(0, 0, y, x), expect);
            }
        }
        assert_eq!(dilate_kernel(&w, 3).shape(), Shape::new(1, 1, 7, 7));
    }

    #[test]
    fn layer_accumulates_bias_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::same(1, 2, 3, 1);
        let mut conv = Conv2d::<f64>::new(spec, true, &mut rng);
        let x = Tensor::randn(Shape::new(2, 1, 4, 4), 1.0, &mut rng);
        let y = conv.forward(&x, Mode::Train).unwrap();
        conv.backward(&Tensor::full(y.shape(), 1.0)).unwrap();
        conv.backward(&Tensor::full(y.shape(), 1.0)).unwrap();
        assert_eq!(conv.bias().unwrap().grad.data(), &[64.0, 64.0]);
        assert_eq!(conv.param_count(), 2 * 9 + 2);
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut conv = Conv2d::<f64>::new(ConvSpec::new(1, 1, 1), false, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(conv.backward(&Tensor::zeros(Shape::new(1, 1, 1, 1))).is_err());
    }
}
