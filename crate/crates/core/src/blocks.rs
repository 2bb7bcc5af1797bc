//! Residual building blocks.
//!
//! * [`ResidualBlock`]: `x + F2(F1(x))`, the conventional pre-activation unit.
//! * [`InnerResidualBlock`]: `F3(F2(F1(x) + H(x)) + H(x)) + H(x)`.
//! * [`DilatedInnerResidualBlock`]: the inner skips are replaced by dilated
//!   branches of the block input,
//!   `t1 = F1(x) + R1(x)`, `t2 = F2(t1) + R2(x)`, `out = F3(t2) + H(x)`,
//!   with `R1` at dilation 2 and `R2` at dilation 3.
//!
//! Every `F`/`R` is a pre-activation composite (batch norm, ReLU, conv).
//! `H` is the identity, or a bias-free 1×1 convolution when the block changes
//! the channel count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, BatchNorm, BufferMuts, BufferRefs, Conv2d, ConvSpec, Layer, Mode, ParamMuts, ParamRefs};
use crate::tensor::{Scalar, Tensor};

/// Batch norm → ReLU → convolution.
pub struct CompositeFn<T> {
    bn: BatchNorm<T>,
    conv: Conv2d<T>,
}

impl<T: Scalar> CompositeFn<T> {
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        CompositeFn { bn: BatchNorm::new(spec.c_in), conv: Conv2d::new(spec, false, rng) }
    }

    pub fn spec(&self) -> &ConvSpec {
        self.conv.spec()
    }

    pub fn bn_mut(&mut self) -> &mut BatchNorm<T> {
        &mut self.bn
    }

    pub fn conv_mut(&mut self) -> &mut Conv2d<T> {
        &mut self.conv
    }
}

impl<T: Scalar> Layer<T> for CompositeFn<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut a = self.bn.forward(x, mode)?;
        a.data_mut().iter_mut().for_each(|v| {
            if *v <= T::zero() {
                *v = T::zero();
            }
        });
        self.conv.forward(&a, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.conv.backward(grad_out)?;
        // The conv input is the ReLU output, which doubles as its mask.
        let activated = self.conv.cached_input().expect("conv backward succeeded");
        g.data_mut().iter_mut().zip(activated.data()).for_each(|(g, &a)| {
            if a <= T::zero() {
                *g = T::zero();
            }
        });
        self.conv.clear_cache();
        let gx = self.bn.backward(&g)?;
        self.bn.clear_cache();
        Ok(gx)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.bn.params(&join(prefix, "bn"), out);
        self.conv.params(&join(prefix, "conv"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        self.bn.params_mut(&join(prefix, "bn"), out);
        self.conv.params_mut(&join(prefix, "conv"), out);
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut BufferRefs<'a, T>) {
        self.bn.buffers(&join(prefix, "bn"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BufferMuts<'a, T>) {
        self.bn.buffers_mut(&join(prefix, "bn"), out);
    }
}

/// The `H` path: identity, or a 1×1 projection when channels change.
pub enum Shortcut<T> {
    Identity,
    Projection(Conv2d<T>),
}

impl<T: Scalar> Shortcut<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        if c_in == c_out {
            Shortcut::Identity
        } else {
            Shortcut::Projection(Conv2d::new(ConvSpec::new(c_in, c_out, 1), false, rng))
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Shortcut::Identity => Ok(x.clone()),
            Shortcut::Projection(p) => p.forward(x, mode),
        }
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Shortcut::Identity => Ok(g.clone()),
            Shortcut::Projection(p) => {
                let gx = p.backward(g)?;
                p.clear_cache();
                Ok(gx)
            }
        }
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        if let Shortcut::Projection(p) = self {
            p.params(prefix, out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        if let Shortcut::Projection(p) = self {
            p.params_mut(prefix, out);
        }
    }
}

/// Named intermediate tensors recorded while capture is enabled.
#[derive(Default)]
pub struct Capture<T> {
    pub enabled: bool,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Capture<T> {
    fn record(&mut self, name: &str, t: &Tensor<T>) {
        if self.enabled {
            self.tensors.push((name.to_string(), t.clone()));
        }
    }

    fn reset(&mut self) {
        self.tensors.clear();
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn merge<T: Scalar>(a: Tensor<T>, b: &Tensor<T>, at: &'static str) -> Result<Tensor<T>> {
    let mut a = a;
    a.add_assign(b).map_err(|e| match e {
        Error::ShapeMismatch { lhs, rhs, .. } => Error::ShapeMismatch { op: at, lhs, rhs },
        other => other,
    })?;
    Ok(a)
}

fn sum3<T: Scalar>(a: Tensor<T>, b: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    let mut a = a;
    a.add_assign(b)?;
    a.add_assign(c)?;
    Ok(a)
}

/// `x + F2(F1(x))`.
pub struct ResidualBlock<T> {
    pub f1: CompositeFn<T>,
    pub f2: CompositeFn<T>,
    pub shortcut: Shortcut<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        ResidualBlock {
            f1: CompositeFn::new(ConvSpec::same(c_in, c_out, 3, 1), rng),
            f2: CompositeFn::new(ConvSpec::same(c_out, c_out, 3, 1), rng),
            shortcut: Shortcut::new(c_in, c_out, rng),
        }
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let f = self.f1.forward(x, mode)?;
        let f = self.f2.forward(&f, mode)?;
        let h = self.shortcut.forward(x, mode)?;
        merge(f, &h, "residual merge")
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let gf = self.f2.backward(g)?;
        let gx = self.f1.backward(&gf)?;
        merge(gx, &self.shortcut.backward(g)?, "residual backward")
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.f1.params(&join(prefix, "F1"), out);
        self.f2.params(&join(prefix, "F2"), out);
        self.shortcut.params(&join(prefix, "H"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        self.f1.params_mut(&join(prefix, "F1"), out);
        self.f2.params_mut(&join(prefix, "F2"), out);
        self.shortcut.params_mut(&join(prefix, "H"), out);
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut BufferRefs<'a, T>) {
        self.f1.buffers(&join(prefix, "F1"), out);
        self.f2.buffers(&join(prefix, "F2"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BufferMuts<'a, T>) {
        self.f1.buffers_mut(&join(prefix, "F1"), out);
        self.f2.buffers_mut(&join(prefix, "F2"), out);
    }
}

/// `F3(F2(F1(x) + H(x)) + H(x)) + H(x)`.
pub struct InnerResidualBlock<T> {
    pub f1: CompositeFn<T>,
    pub f2: CompositeFn<T>,
    pub f3: CompositeFn<T>,
    pub shortcut: Shortcut<T>,
}

impl<T: Scalar> InnerResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        InnerResidualBlock {
            f1: CompositeFn::new(ConvSpec::same(c_in, c_out, 3, 1), rng),
            f2: CompositeFn::new(ConvSpec::same(c_out, c_out, 3, 1), rng),
            f3: CompositeFn::new(ConvSpec::same(c_out, c_out, 3, 1), rng),
            shortcut: Shortcut::new(c_in, c_out, rng),
        }
    }
}

impl<T: Scalar> Layer<T> for InnerResidualBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.shortcut.forward(x, mode)?;
        let t1 = merge(self.f1.forward(x, mode)?, &h, "inner merge 1")?;
        let t2 = merge(self.f2.forward(&t1, mode)?, &h, "inner merge 2")?;
        merge(self.f3.forward(&t2, mode)?, &h, "outer merge")
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g_t2 = self.f3.backward(g)?;
        let g_t1 = self.f2.backward(&g_t2)?;
        let g_h = sum3(g.clone(), &g_t2, &g_t1)?;
        let gx = self.f1.backward(&g_t1)?;
        merge(gx, &self.shortcut.backward(&g_h)?, "inner residual backward")
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.f1.params(&join(prefix, "F1"), out);
        self.f2.params(&join(prefix, "F2"), out);
        self.f3.params(&join(prefix, "F3"), out);
        self.shortcut.params(&join(prefix, "H"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        self.f1.params_mut(&join(prefix, "F1"), out);
        self.f2.params_mut(&join(prefix, "F2"), out);
        self.f3.params_mut(&join(prefix, "F3"), out);
        self.shortcut.params_mut(&join(prefix, "H"), out);
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut BufferRefs<'a, T>) {
        self.f1.buffers(&join(prefix, "F1"), out);
        self.f2.buffers(&join(prefix, "F2"), out);
        self.f3.buffers(&join(prefix, "F3"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BufferMuts<'a, T>) {
        self.f1.buffers_mut(&join(prefix, "F1"), out);
        self.f2.buffers_mut(&join(prefix, "F2"), out);
        self.f3.buffers_mut(&join(prefix, "F3"), out);
    }
}

/// Wiring of one dilated inner residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub f1: ConvSpec,
    pub f2: ConvSpec,
    pub f3: ConvSpec,
    pub r1: ConvSpec,
    pub r2: ConvSpec,
    /// 1×1 projection for `H`, present iff `c_in != c_out`.
    pub projection: Option<ConvSpec>,
}

impl BlockConfig {
    pub const R1_DILATION: usize = 2;
    pub const R2_DILATION: usize = 3;

    pub fn new(c_in: usize, c_out: usize) -> Self {
        BlockConfig {
            c_in,
            c_out,
            f1: ConvSpec::same(c_in, c_out, 3, 1),
            f2: ConvSpec::same(c_out, c_out, 3, 1),
            f3: ConvSpec::same(c_out, c_out, 3, 1),
            r1: ConvSpec::same(c_in, c_out, 3, Self::R1_DILATION),
            r2: ConvSpec::same(c_in, c_out, 3, Self::R2_DILATION),
            projection: (c_in != c_out).then(|| ConvSpec::new(c_in, c_out, 1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("block {}->{}: {what}", self.c_in, self.c_out)));
        if self.f1.c_in != self.c_in || self.r1.c_in != self.c_in || self.r2.c_in != self.c_in {
            return bad("F1, R1 and R2 must consume the block input");
        }
        if [self.f1, self.f2, self.f3, self.r1, self.r2].iter().any(|s| s.c_out != self.c_out) {
            return bad("every branch must produce c_out channels");
        }
        if self.f2.c_in != self.c_out || self.f3.c_in != self.c_out {
            return bad("F2 and F3 map c_out to c_out");
        }
        if self.r1.dilation != Self::R1_DILATION || self.r2.dilation != Self::R2_DILATION {
            return bad("R1 and R2 dilations must be 2 and 3");
        }
        if self.projection.is_some() != (self.c_in != self.c_out) {
            return bad("projection must exist exactly when channels change");
        }
        Ok(())
    }

    fn composites(&self) -> [ConvSpec; 5] {
        [self.f1, self.r1, self.f2, self.r2, self.f3]
    }
}

/// Learnable-parameter breakdown of one dilated inner residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParamCount {
    pub conv_weights: usize,
    /// Scale and shift of the five batch norms.
    pub batch_norm: usize,
    pub projection: usize,
    pub total: usize,
    /// Extra weights a block would need if each dilated branch used a regular
    /// kernel of the same extent (k=5 for R1, k=7 for R2).
    pub savings_vs_regular: usize,
}

pub fn block_param_count(cfg: &BlockConfig) -> BlockParamCount {
    let specs = cfg.composites();
    let conv_weights = specs.iter().map(ConvSpec::weight_count).sum();
    let batch_norm = specs.iter().map(|s| 2 * s.c_in).sum();
    let projection = cfg.projection.map_or(0, |p| p.weight_count());
    let savings_vs_regular = [cfg.r1, cfg.r2]
        .iter()
        .map(|s| {
            let ext = s.effective_extent();
            (ext * ext - s.k * s.k) * s.c_in * s.c_out
        })
        .sum();
    BlockParamCount {
        conv_weights,
        batch_norm,
        projection,
        total: conv_weights + batch_norm + projection,
        savings_vs_regular,
    }
}

/// `t1 = F1(x) + R1(x)`, `t2 = F2(t1) + R2(x)`, `out = F3(t2) + H(x)`.
///
/// With capture enabled, forward records `F1`, `R1`, `sum1`, `F2`, `R2`,
/// `sum2`, `F3`, `H` and `out`.
pub struct DilatedInnerResidualBlock<T> {
    cfg: BlockConfig,
    pub f1: CompositeFn<T>,
    pub f2: CompositeFn<T>,
    pub f3: CompositeFn<T>,
    pub r1: CompositeFn<T>,
    pub r2: CompositeFn<T>,
    pub shortcut: Shortcut<T>,
    pub capture: Capture<T>,
}

impl<T: Scalar> DilatedInnerResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(DilatedInnerResidualBlock {
            cfg,
            f1: CompositeFn::new(cfg.f1, rng),
            r1: CompositeFn::new(cfg.r1, rng),
            f2: CompositeFn::new(cfg.f2, rng),
            r2: CompositeFn::new(cfg.r2, rng),
            f3: CompositeFn::new(cfg.f3, rng),
            shortcut: Shortcut::new(cfg.c_in, cfg.c_out, rng),
            capture: Capture::default(),
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }
}

impl<T: Scalar> Layer<T> for DilatedInnerResidualBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.capture.reset();
        let f1 = self.f1.forward(x, mode)?;
        let r1 = self.r1.forward(x, mode)?;
        self.capture.record("F1", &f1);
        self.capture.record("R1", &r1);
        let t1 = merge(f1, &r1, "F1 + R1")?;
        drop(r1);
        self.capture.record("sum1", &t1);

        let f2 = self.f2.forward(&t1, mode)?;
        drop(t1);
        let r2 = self.r2.forward(x, mode)?;
        self.capture.record("F2", &f2);
        self.capture.record("R2", &r2);
        let t2 = merge(f2, &r2, "F2 + R2")?;
        drop(r2);
        self.capture.record("sum2", &t2);

        let f3 = self.f3.forward(&t2, mode)?;
        drop(t2);
        let h = self.shortcut.forward(x, mode)?;
        self.capture.record("F3", &f3);
        self.capture.record("H", &h);
        let out = merge(f3, &h, "F3 + H")?;
        self.capture.record("out", &out);
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g_t2 = self.f3.backward(g)?;
        let g_t1 = self.f2.backward(&g_t2)?;
        let gx = self.r2.backward(&g_t2)?;
        drop(g_t2);
        let gx = merge(gx, &self.f1.backward(&g_t1)?, "block backward")?;
        let gx = merge(gx, &self.r1.backward(&g_t1)?, "block backward")?;
        merge(gx, &self.shortcut.backward(g)?, "block backward")
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.f1.params(&join(prefix, "F1"), out);
        self.r1.params(&join(prefix, "R1"), out);
        self.f2.params(&join(prefix, "F2"), out);
        self.r2.params(&join(prefix, "R2"), out);
        self.f3.params(&join(prefix, "F3"), out);
        self.shortcut.params(&join(prefix, "H"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        self.f1.params_mut(&join(prefix, "F1"), out);
        self.r1.params_mut(&join(prefix, "R1"), out);
        self.f2.params_mut(&join(prefix, "F2"), out);
        self.r2.params_mut(&join(prefix, "R2"), out);
        self.f3.params_mut(&join(prefix, "F3"), out);
        self.shortcut.params_mut(&join(prefix, "H"), out);
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut BufferRefs<'a, T>) {
        self.f1.buffers(&join(prefix, "F1"), out);
        self.r1.buffers(&join(prefix, "R1"), out);
        self.f2.buffers(&join(prefix, "F2"), out);
        self.r2.buffers(&join(prefix, "R2"), out);
        self.f3.buffers(&join(prefix, "F3"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BufferMuts<'a, T>) {
        self.f1.buffers_mut(&join(prefix, "F1"), out);
        self.r1.buffers_mut(&join(prefix, "R1"), out);
        self.f2.buffers_mut(&join(prefix, "F2"), out);
        self.r2.buffers_mut(&join(prefix, "R2"), out);
        self.f3.buffers_mut(&join(prefix, "F3"), out);
    }
}

/// Zeroes every convolution weight reachable from `layer`.
pub fn zero_conv_weights<T: Scalar>(layer: &mut dyn Layer<T>) {
    let mut ps = Vec::new();
    layer.params_mut("", &mut ps);
    for (name, p) in ps {
        if name.ends_with("conv.weight") || name.starts_with("H.") || name.contains(".H.") {
            p.value.fill(T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::backward_check;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomize_bn<T: Scalar>(layer: &mut dyn Layer<T>, rng: &mut ChaCha8Rng) {
        let mut ps = Vec::new();
        layer.params_mut("", &mut ps);
        for (name, p) in ps {
            if name.ends_with("gamma") {
                p.value = Tensor::uniform(p.shape(), 0.5, 1.5, rng);
            } else if name.ends_with("beta") {
                p.value = Tensor::uniform(p.shape(), -0.5, 0.5, rng);
            }
        }
    }

    #[test]
    fn zero_weight_blocks_are_identity() {
        let mut g = rng(1);
        let x = Tensor::<f64>::randn(Shape::new(2, 4, 8, 8), 1.0, &mut g);
        let mut blocks: Vec<Box<dyn Layer<f64>>> = vec![
            Box::new(ResidualBlock::new(4, 4, &mut g)),
            Box::new(InnerResidualBlock::new(4, 4, &mut g)),
            Box::new(DilatedInnerResidualBlock::new(BlockConfig::new(4, 4), &mut g).unwrap()),
        ];
        for b in &mut blocks {
            zero_conv_weights(b.as_mut());
            for mode in [Mode::Train, Mode::Infer] {
                assert_eq!(b.forward(&x, mode).unwrap().max_abs_diff(&x).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut g = rng(2);
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 6, 6));
        let mut b = ResidualBlock::new(4, 4, &mut g);
        assert_eq!(b.forward(&x, Mode::Train).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn residual_matches_hand_chained_layers() {
        let mut g = rng(3);
        let x = Tensor::<f64>::randn(Shape::new(1, 4, 8, 8), 1.0, &mut g);
        let mut b = ResidualBlock::new(4, 4, &mut g);
        let got = b.forward(&x, Mode::Infer).unwrap();
        let f = b.f1.forward(&x, Mode::Infer).unwrap();
        let want = b.f2.forward(&f, Mode::Infer).unwrap().add(&x).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn inner_residual_matches_hand_chained_layers() {
        let mut g = rng(4);
        let x = Tensor::<f64>::randn(Shape::new(1, 4, 6, 6), 1.0, &mut g);
        let mut b = InnerResidualBlock::new(4, 4, &mut g);
        randomize_bn(&mut b, &mut g);
        let got = b.forward(&x, Mode::Infer).unwrap();
        let t1 = b.f1.forward(&x, Mode::Infer).unwrap().add(&x).unwrap();
        let t2 = b.f2.forward(&t1, Mode::Infer).unwrap().add(&x).unwrap();
        let want = b.f3.forward(&t2, Mode::Infer).unwrap().add(&x).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn inner_residual_telescopes_over_two_blocks() {
        let mut g = rng(5);
        let x = Tensor::<f64>::randn(Shape::new(1, 4, 6, 6), 1.0, &mut g);
        let mut a = InnerResidualBlock::new(4, 4, &mut g);
        let mut b = InnerResidualBlock::new(4, 4, &mut g);
        let x1 = a.forward(&x, Mode::Infer).unwrap();
        let x2 = b.forward(&x1, Mode::Infer).unwrap();
        // each block contributes F_IR(x_k) = out_k - x_k
        let total = x1.sub(&x).unwrap().add(&x2.sub(&x1).unwrap()).unwrap();
        let telescoped = x.add(&total).unwrap();
        assert!(telescoped.max_abs_diff(&x2).unwrap() < 1e-12);
    }

    #[test]
    fn dilated_block_follows_wiring() {
        let mut g = rng(6);
        let x = Tensor::<f64>::randn(Shape::new(1, 8, 14, 14), 1.0, &mut g);
        let mut b = DilatedInnerResidualBlock::new(BlockConfig::new(8, 8), &mut g).unwrap();
        randomize_bn(&mut b, &mut g);
        b.capture.enabled = true;
        let got = b.forward(&x, Mode::Infer).unwrap();

        let t1 = b.f1.forward(&x, Mode::Infer).unwrap().add(&b.r1.forward(&x, Mode::Infer).unwrap()).unwrap();
        let t2 = b.f2.forward(&t1, Mode::Infer).unwrap().add(&b.r2.forward(&x, Mode::Infer).unwrap()).unwrap();
        let want = b.f3.forward(&t2, Mode::Infer).unwrap().add(&x).unwrap();
        assert_eq!(got, want);
        assert_eq!(b.capture.get("sum1").unwrap(), &t1);
        assert_eq!(b.capture.get("sum2").unwrap(), &t2);
        assert_eq!(b.capture.get("out").unwrap(), &got);
    }

    #[test]
    fn dilated_block_without_r_branches_is_plain_chain() {
        let mut g = rng(7);
        let x = Tensor::<f64>::randn(Shape::new(1, 4, 8, 8), 1.0, &mut g);
        let mut b = DilatedInnerResidualBlock::new(BlockConfig::new(4, 4), &mut g).unwrap();
        b.r1.conv_mut().weight_mut().value.fill(0.0);
        b.r2.conv_mut().weight_mut().value.fill(0.0);
        let got = b.forward(&x, Mode::Infer).unwrap();
        let f = b.f1.forward(&x, Mode::Infer).unwrap();
        let f = b.f2.forward(&f, Mode::Infer).unwrap();
        let want = b.f3.forward(&f, Mode::Infer).unwrap().add(&x).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn channel_change_uses_projection() {
        let mut g = rng(8);
        let cfg = BlockConfig::new(4, 8);
        let mut b = DilatedInnerResidualBlock::<f64>::new(cfg, &mut g).unwrap();
        assert!(matches!(b.shortcut, Shortcut::Projection(_)));
        let y = b.forward(&Tensor::randn(Shape::new(2, 4, 7, 7), 1.0, &mut g), Mode::Train).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 8, 7, 7));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = BlockConfig::new(4, 4);
        cfg.r2 = cfg.r2.with_dilation(2);
        assert!(cfg.validate().is_err());
        let mut cfg = BlockConfig::new(4, 8);
        cfg.projection = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_examples() {
        let c = block_param_count(&BlockConfig::new(64, 64));
        assert_eq!(c.savings_vs_regular, 64 * 64 * ((25 - 9) + (49 - 9)));
        assert_eq!(c.savings_vs_regular, 229_376);

        let c = block_param_count(&BlockConfig::new(1, 1));
        assert_eq!(c.conv_weights, 45);
        assert_eq!(c.projection, 0);
    }

    #[test]
    fn param_count_matches_registry() {
        let mut g = rng(9);
        for (ci, co) in [(64, 64), (64, 128), (128, 256), (256, 256), (3, 5)] {
            let cfg = BlockConfig::new(ci, co);
            let b = DilatedInnerResidualBlock::<f32>::new(cfg, &mut g).unwrap();
            assert_eq!(block_param_count(&cfg).total, b.param_count(), "{ci}->{co}");
        }
    }

    #[test]
    fn dilated_block_is_cheaper_than_regular_equivalent() {
        for c in [1, 2, 3, 16, 64, 256] {
            let count = block_param_count(&BlockConfig::new(c, c));
            assert!(count.total + count.savings_vs_regular > count.total);
        }
    }

    #[test]
    fn blocks_pass_gradient_check() {
        let mut g = rng(10);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 6, 6), 1.0, &mut g);
        let mut blocks: Vec<(&str, Box<dyn Layer<f64>>)> = vec![
            ("residual", Box::new(ResidualBlock::new(3, 4, &mut g))),
            ("inner", Box::new(InnerResidualBlock::new(3, 4, &mut g))),
            ("dilated", Box::new(DilatedInnerResidualBlock::new(BlockConfig::new(3, 4), &mut g).unwrap())),
        ];
        for (name, b) in &mut blocks {
            randomize_bn(b.as_mut(), &mut g);
            let err = backward_check(b.as_mut(), &x, 1e-4).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
