//! Rank-4 tensors in (batch, channels, height, width) order.
//!
//! Every activation, weight and gradient in the engine is a [`Tensor`]. Data
//! is dense and row-major within each (h, w) plane, channels outer to planes
//! and the batch index outermost.

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the training precision, `f64` the
/// gradient-check precision.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a·b` (or `c += a·b` when `accumulate`), with `a` an m×k matrix and
    /// `b` a k×n matrix addressed through explicit row/column strides, and `c`
    /// row-major with row stride `c_rs`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_rs: usize,
        a_cs: usize,
        b: &[Self],
        b_rs: usize,
        b_cs: usize,
        accumulate: bool,
        c: &mut [Self],
        c_rs: usize,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm: operand {what} too short ({len} <= {last})");
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_rs: usize,
        a_cs: usize,
        b: &[f32],
        b_rs: usize,
        b_cs: usize,
        accumulate: bool,
        c: &mut [f32],
        c_rs: usize,
    ) {
        check_extent(a.len(), m, k, a_rs, a_cs, "a");
        check_extent(b.len(), k, n, b_rs, b_cs, "b");
        check_extent(c.len(), m, n, c_rs, 1, "c");
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: every index the kernel touches was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_rs as isize,
                a_cs as isize,
                b.as_ptr(),
                b_rs as isize,
                b_cs as isize,
                beta,
                c.as_mut_ptr(),
                c_rs as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    /// Reference kernel: each output element sums its k products strictly in
    /// index order starting from +0. Taps whose weight is zero therefore leave
    /// the accumulator bit-identical, which the dilation equivalence relies on.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_rs: usize,
        a_cs: usize,
        b: &[f64],
        b_rs: usize,
        b_cs: usize,
        accumulate: bool,
        c: &mut [f64],
        c_rs: usize,
    ) {
        check_extent(a.len(), m, k, a_rs, a_cs, "a");
        check_extent(b.len(), k, n, b_rs, b_cs, "b");
        check_extent(c.len(), m, n, c_rs, 1, "c");
        let mut row = vec![0.0f64; n];
        for i in 0..m {
            row.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let aip = a[i * a_rs + p * a_cs];
                let brow = p * b_rs;
                for (j, acc) in row.iter_mut().enumerate() {
                    *acc += aip * b[brow + j * b_cs];
                }
            }
            let dst = &mut c[i * c_rs..i * c_rs + n];
            if accumulate {
                dst.iter_mut().zip(&row).for_each(|(d, r)| *d += *r);
            } else {
                dst.copy_from_slice(&row);
            }
        }
    }
}

/// (n, c, h, w) dimensions of a tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape { n, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::Construction(format!("all dimensions must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Initial contents for [`Tensor::new`].
#[derive(Clone, Debug)]
pub enum Fill<T> {
    Value(T),
    Values(Vec<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, fill: Fill<T>) -> Result<Self> {
        shape.validate()?;
        match fill {
            Fill::Value(v) => Ok(Tensor { shape, data: vec![v; shape.len()] }),
            Fill::Values(values) => Self::from_vec(shape, values),
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::Construction(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if any dimension is zero.
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, v: T) -> Self {
        assert!(shape.validate().is_ok(), "invalid tensor shape {shape}");
        Tensor { shape, data: vec![v; shape.len()] }
    }

    /// Normal samples with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        debug_assert!(n < s.n && c < s.c && h < s.h && w < s.w);
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// The `c`-th (h, w) plane of sample `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        shape.validate()?;
        if shape.len() != self.shape.len() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape, rhs: shape });
        }
        Ok(Tensor { shape, data: self.data })
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op, lhs: self.shape, rhs: other.shape });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += s * b);
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Sequential left-to-right sum.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Finiteness guard applied to engine outputs; compiled in only with debug
    /// assertions.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        if cfg!(debug_assertions) && !self.all_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    /// Concatenates samples along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no tensors given"))?;
        let unit = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in parts {
            if t.shape.with_n(1) != unit.with_n(1) {
                return Err(Error::ShapeMismatch { op: "stack", lhs: unit, rhs: t.shape });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: unit.with_n(n), data })
    }
}

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> GradPair<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        GradPair { value, grad }
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}
