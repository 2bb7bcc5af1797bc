//! The full classifier: layer schedule, builder, activation capture,
//! feature-map dumps and checkpoints.
//!
//! Schedule (output sizes for a 56×56 input):
//!
//! | row      | output      | op                         |
//! |----------|-------------|----------------------------|
//! | Conv1    | 56×56×64    | 1×1 conv, 64, stride 1     |
//! | Conv2a,b | 56×56×64    | two dilated blocks, 64     |
//! | Pool1    | 28×28×64    | 3×3 max pool, stride 2     |
//! | Conv2c   | 28×28×64    | dilated block, 64          |
//! | Conv3a   | 28×28×128   | dilated block, 128         |
//! | Pool2    | 14×14×128   | 3×3 max pool, stride 2     |
//! | Conv4a   | 14×14×256   | dilated block, 256         |
//! | Pool3    | 7×7×256     | 3×3 max pool, stride 2     |
//! | Conv4b   | 7×7×256     | dilated block, 256         |
//! | AvgPool  | 1×1×256     | 7×7 average pool           |
//! | Dense1   | 512         | fully connected + ReLU     |
//! | Dense2   | classes     | fully connected + softmax  |

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BlockConfig, DilatedInnerResidualBlock};
use crate::error::{Error, Result};
use crate::layers::{
    join, softmax, AvgPool, BufferMuts, BufferRefs, Conv2d, ConvSpec, Dense, Layer, MaxPool, Mode, ParamMuts, ParamRefs, Relu,
};
use crate::tensor::{Scalar, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TRCL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageKind {
    Conv { spec: ConvSpec, bias: bool },
    Block(BlockConfig),
    MaxPool { k: usize, stride: usize, pad: usize },
    AvgPool { k: usize },
    /// Fully connected, optionally followed by ReLU.
    Dense { inputs: usize, outputs: usize, relu: bool },
    /// Fully connected layer whose output feeds the softmax.
    Classifier { inputs: usize, outputs: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    /// Activation / parameter prefix, e.g. `conv2a`.
    pub name: String,
    /// Row of the layer table this stage belongs to, e.g. `Conv2a,b`.
    pub row: &'static str,
    pub kind: StageKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    /// (channels, height, width) of one input sample.
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub stages: Vec<Stage>,
}

/// One row of a shape trace: (channels, height, width) after the row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub row: &'static str,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl std::fmt::Display for TraceRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.h == 1 && self.w == 1 && self.row.starts_with("Dense") {
            write!(f, "{}", self.c)
        } else {
            write!(f, "{}x{}x{}", self.h, self.w, self.c)
        }
    }
}

impl NetworkSpec {
    pub const INPUT_SIZE: usize = 56;

    /// Full-size classifier for 56×56 RGB input.
    pub fn paper(num_classes: usize) -> Result<Self> {
        Self::with_widths(num_classes, [64, 128, 256], Self::INPUT_SIZE, 512)
    }

    /// Same topology with stage widths `widths`, square input of side
    /// `input_hw` and `hidden` units in the first dense layer. The average
    /// pool always spans the whole final feature map.
    pub fn with_widths(num_classes: usize, widths: [usize; 3], input_hw: usize, hidden: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if widths.contains(&0) || hidden == 0 || input_hw == 0 {
            return Err(Error::Config("widths, hidden units and input size must be positive".into()));
        }
        let [a, b, c] = widths;
        let pool = |name: &str, row| Stage { name: name.into(), row, kind: StageKind::MaxPool { k: 3, stride: 2, pad: 1 } };
        let block = |name: &str, row, ci, co| Stage { name: name.into(), row, kind: StageKind::Block(BlockConfig::new(ci, co)) };
        let mut stages = vec![
            Stage { name: "conv1".into(), row: "Conv1", kind: StageKind::Conv { spec: ConvSpec::new(3, a, 1), bias: true } },
            block("conv2a", "Conv2a,b", a, a),
            block("conv2b", "Conv2a,b", a, a),
            pool("pool1", "Pool1"),
            block("conv2c", "Conv2c", a, a),
            block("conv3a", "Conv3a", a, b),
            pool("pool2", "Pool2"),
            block("conv4a", "Conv4a", b, c),
            pool("pool3", "Pool3"),
            block("conv4b", "Conv4b", c, c),
        ];
        let mut side = input_hw;
        for _ in 0..3 {
            side = (side + 2 - 3) / 2 + 1;
        }
        stages.push(Stage { name: "avgpool".into(), row: "AvgPool", kind: StageKind::AvgPool { k: side } });
        stages.push(Stage {
            name: "dense1".into(),
            row: "Dense1",
            kind: StageKind::Dense { inputs: c, outputs: hidden, relu: true },
        });
        stages.push(Stage {
            name: "dense2".into(),
            row: "Dense2",
            kind: StageKind::Classifier { inputs: hidden, outputs: num_classes },
        });
        let spec = NetworkSpec { input: (3, input_hw, input_hw), num_classes, stages };
        spec.trace()?;
        Ok(spec)
    }

    /// Output (c, h, w) after every stage, computed from the stage algebra.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut c, mut h, mut w) = self.input;
        let mut out = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let bad = |msg: String| Error::Config(format!("stage {}: {msg}", st.name));
            match &st.kind {
                StageKind::Conv { spec, .. } => {
                    if spec.c_in != c {
                        return Err(bad(format!("expects {} channels, gets {c}", spec.c_in)));
                    }
                    (h, w) = spec.output_hw(h, w)?;
                    c = spec.c_out;
                }
                StageKind::Block(cfg) => {
                    if cfg.c_in != c {
                        return Err(bad(format!("expects {} channels, gets {c}", cfg.c_in)));
                    }
                    cfg.validate()?;
                    for s in [cfg.f1, cfg.r1, cfg.r2] {
                        if s.output_hw(h, w)? != (h, w) {
                            return Err(bad("block branch changes spatial size".into()));
                        }
                    }
                    c = cfg.c_out;
                }
                StageKind::MaxPool { k, stride, pad } => {
                    let s = MaxPool::new(*k, *stride, *pad).output_shape(Shape::new(1, c, h, w))?;
                    (h, w) = (s.h, s.w);
                }
                StageKind::AvgPool { k } => {
                    let s = AvgPool::new(*k).output_shape(Shape::new(1, c, h, w))?;
                    (h, w) = (s.h, s.w);
                }
                StageKind::Dense { inputs, outputs, .. } | StageKind::Classifier { inputs, outputs } => {
                    if *inputs != c * h * w {
                        return Err(bad(format!("expects {inputs} features, gets {}", c * h * w)));
                    }
                    (c, h, w) = (*outputs, 1, 1);
                }
            }
            out.push((c, h, w));
        }
        Ok(out)
    }

    /// One entry per table row, holding the output of the row's last stage.
    pub fn trace(&self) -> Result<Vec<TraceRow>> {
        let shapes = self.stage_shapes()?;
        let mut rows: Vec<TraceRow> = Vec::new();
        for (st, &(c, h, w)) in self.stages.iter().zip(&shapes) {
            let row = TraceRow { row: st.row, c, h, w };
            match rows.last_mut() {
                Some(last) if last.row == st.row => *last = row,
                _ => rows.push(row),
            }
        }
        Ok(rows)
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.input.0, self.input.1, self.input.2)
    }
}

enum Node<T> {
    Conv(Conv2d<T>),
    Block(Box<DilatedInnerResidualBlock<T>>),
    MaxPool(MaxPool),
    AvgPool(AvgPool),
    Dense(Dense<T>, Option<Relu<T>>),
}

impl<T: Scalar> Node<T> {
    fn layer(&mut self) -> &mut dyn Layer<T> {
        match self {
            Node::Conv(l) => l,
            Node::Block(l) => l.as_mut(),
            Node::MaxPool(l) => l,
            Node::AvgPool(l) => l,
            Node::Dense(l, _) => l,
        }
    }

    fn layer_ref(&self) -> &dyn Layer<T> {
        match self {
            Node::Conv(l) => l,
            Node::Block(l) => l.as_ref(),
            Node::MaxPool(l) => l,
            Node::AvgPool(l) => l,
            Node::Dense(l, _) => l,
        }
    }
}

/// The network as a single layer from images to logits, so generic tooling
/// such as the gradient checker applies to it.
impl<T: Scalar> Layer<T> for Network<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(Network::forward(self, x, mode)?.logits)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        Network::backward(self, grad_out)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        for (st, node) in self.spec.stages.iter().zip(&self.nodes) {
            node.layer_ref().params(&join(prefix, &st.name), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        for (st, node) in self.spec.stages.iter().zip(&mut self.nodes) {
            node.layer().params_mut(&join(prefix, &st.name), out);
        }
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut BufferRefs<'a, T>) {
        for (st, node) in self.spec.stages.iter().zip(&self.nodes) {
            node.layer_ref().buffers(&join(prefix, &st.name), out);
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BufferMuts<'a, T>) {
        for (st, node) in self.spec.stages.iter().zip(&mut self.nodes) {
            node.layer().buffers_mut(&join(prefix, &st.name), out);
        }
    }
}

/// Result of a forward pass.
pub struct Output<T> {
    /// (n, classes, 1, 1) pre-softmax scores.
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

pub struct Network<T> {
    spec: NetworkSpec,
    nodes: Vec<Node<T>>,
    capture: bool,
    captured: Vec<(String, Tensor<T>)>,
    trace: Vec<(&'static str, Shape)>,
}

impl<T: Scalar> Network<T> {
    /// Builds the network with weights drawn from a generator seeded by `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.stage_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = Vec::with_capacity(spec.stages.len());
        for st in &spec.stages {
            nodes.push(match &st.kind {
                StageKind::Conv { spec, bias } => Node::Conv(Conv2d::new(*spec, *bias, &mut rng)),
                StageKind::Block(cfg) => Node::Block(Box::new(DilatedInnerResidualBlock::new(*cfg, &mut rng)?)),
                StageKind::MaxPool { k, stride, pad } => Node::MaxPool(MaxPool::new(*k, *stride, *pad)),
                StageKind::AvgPool { k } => Node::AvgPool(AvgPool::new(*k)),
                StageKind::Dense { inputs, outputs, relu } => {
                    Node::Dense(Dense::new(*inputs, *outputs, &mut rng), relu.then(Relu::new))
                }
                StageKind::Classifier { inputs, outputs } => Node::Dense(Dense::new(*inputs, *outputs, &mut rng), None),
            });
        }
        Ok(Network { spec, nodes, capture: false, captured: Vec::new(), trace: Vec::new() })
    }

    /// Full-size network for `num_classes` classes.
    pub fn build(num_classes: usize, seed: u64) -> Result<Self> {
        Self::new(NetworkSpec::paper(num_classes)?, seed)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Record named intermediate activations on subsequent forward passes.
    pub fn set_capture(&mut self, on: bool) {
        self.capture = on;
        for node in &mut self.nodes {
            if let Node::Block(b) = node {
                b.capture.enabled = on;
            }
        }
        if !on {
            self.captured.clear();
        }
    }

    /// Output shape of every table row during the latest forward pass.
    pub fn last_trace(&self) -> Vec<TraceRow> {
        self.trace.iter().map(|&(row, s)| TraceRow { row, c: s.c, h: s.h, w: s.w }).collect()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Output<T>> {
        let s = x.shape();
        let (c, h, w) = self.spec.input;
        if (s.c, s.h, s.w) != (c, h, w) {
            return Err(Error::ShapeMismatch { op: "network input", lhs: s, rhs: self.spec.input_shape(s.n) });
        }
        self.captured.clear();
        self.trace.clear();
        let mut cur = x.clone();
        for (st, node) in self.spec.stages.iter().zip(&mut self.nodes) {
            cur = node.layer().forward(&cur, mode)?;
            if let Node::Dense(_, Some(relu)) = node {
                cur = relu.forward(&cur, mode)?;
            }
            if self.capture {
                if let Node::Block(b) = node {
                    for (name, t) in b.capture.tensors.drain(..) {
                        self.captured.push((format!("{}.{name}", st.name), t));
                    }
                }
                self.captured.push((st.name.clone(), cur.clone()));
            }
            match self.trace.last_mut() {
                Some(last) if last.0 == st.row => last.1 = cur.shape(),
                _ => self.trace.push((st.row, cur.shape())),
            }
        }
        cur.check_finite("network forward")?;
        let probs = softmax(&cur);
        Ok(Output { logits: cur, probs })
    }

    /// Backpropagates a gradient with respect to the logits of the latest
    /// train-mode forward pass; parameter gradients accumulate.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_logits.clone();
        for node in self.nodes.iter_mut().rev() {
            if let Node::Dense(_, Some(relu)) = node {
                g = relu.backward(&g)?;
            }
            g = node.layer().backward(&g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> ParamRefs<'_, T> {
        let mut out = Vec::new();
        for (st, node) in self.spec.stages.iter().zip(&self.nodes) {
            node.layer_ref().params(&st.name, &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> ParamMuts<'_, T> {
        let mut out = Vec::new();
        for (st, node) in self.spec.stages.iter().zip(&mut self.nodes) {
            node.layer().params_mut(&st.name, &mut out);
        }
        out
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (st, node) in self.spec.stages.iter().zip(&self.nodes) {
            node.layer_ref().buffers(&st.name, &mut out);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (st, node) in self.spec.stages.iter().zip(&mut self.nodes) {
            node.layer().buffers_mut(&st.name, &mut out);
        }
        out
    }

    /// Learnable parameters per stage name, in schedule order.
    pub fn param_counts(&self) -> Vec<(String, usize)> {
        self.spec
            .stages
            .iter()
            .zip(&self.nodes)
            .map(|(st, node)| (st.name.clone(), node.layer_ref().param_count()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn activation_names(&self) -> Vec<String> {
        self.captured.iter().map(|(n, _)| n.clone()).collect()
    }

    /// A captured activation by name. `a+b` sums two activations; a bare
    /// right operand inherits the left operand's stage prefix, so
    /// `conv2a.F2+R1` means `conv2a.F2 + conv2a.R1`.
    pub fn activation(&self, name: &str) -> Result<Tensor<T>> {
        let lookup = |n: &str| {
            self.captured
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::UnknownActivation(n.to_string()))
        };
        let mut parts = name.split('+').map(str::trim);
        let first = parts.next().unwrap_or_default();
        let prefix = first.rsplit_once('.').map(|(p, _)| p);
        let mut acc = lookup(first)?;
        for part in parts {
            let full = match prefix {
                Some(p) if !part.contains('.') => format!("{p}.{part}"),
                _ => part.to_string(),
            };
            acc.add_assign(&lookup(&full)?)?;
        }
        Ok(acc)
    }

    /// Copies parameters and buffers from a checkpoint file.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::read(path)?;
        if ckpt.num_classes as usize != self.num_classes() {
            return Err(Error::Checkpoint(format!(
                "{} was saved for {} classes, network has {}",
                path.display(),
                ckpt.num_classes,
                self.num_classes()
            )));
        }
        let find = |name: &str| {
            ckpt.entries
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, s, d)| (*s, d))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        // Validate everything before touching any weights.
        let expected: Vec<(String, Shape)> = self
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.value.shape()))
            .chain(self.buffers().into_iter().map(|(n, b)| (n, b.shape())))
            .collect();
        if expected.len() != ckpt.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, network has {}",
                ckpt.entries.len(),
                expected.len()
            )));
        }
        for (name, want) in &expected {
            let (shape, _) = find(name)?;
            if shape != *want {
                return Err(Error::Checkpoint(format!("{name}: stored {shape}, expected {want}")));
            }
        }
        let copy = |dst: &mut Tensor<T>, src: &[f32]| {
            dst.data_mut().iter_mut().zip(src).for_each(|(d, &v)| *d = T::of(v as f64));
        };
        for (name, p) in self.params_mut() {
            copy(&mut p.value, find(&name)?.1);
        }
        for (name, b) in self.buffers_mut() {
            copy(b, find(&name)?.1);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for (name, p) in self.params() {
            entries.push((name, p.value.shape(), p.value.data().iter().map(|v| v.as_f64() as f32).collect()));
        }
        for (name, b) in self.buffers() {
            entries.push((name, b.shape(), b.data().iter().map(|v| v.as_f64() as f32).collect()));
        }
        Checkpoint { num_classes: self.num_classes() as u32, entries }.write(path)
    }
}

/// In-memory form of a checkpoint file.
///
/// Layout: `TRCL`, version u32, classes u32, entry count u32, then per
/// entry: name length u32, UTF-8 name, shape as 4×u32, little-endian f32
/// values. All integers are little-endian.
pub struct Checkpoint {
    pub num_classes: u32,
    pub entries: Vec<(String, Shape, Vec<f32>)>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        for v in [CHECKPOINT_VERSION, self.num_classes, self.entries.len() as u32] {
            f.write_all(&v.to_le_bytes())?;
        }
        for (name, shape, data) in &self.entries {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            for d in shape.dims() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let num_classes = cur.u32()?;
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let d = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?].map(|v| v as usize);
            let shape = Shape::new(d[0], d[1], d[2], d[3]);
            let raw = cur.take(shape.len() * 4)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            entries.push((name, shape, data));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Checkpoint { num_classes, entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes one tiled PGM grid per requested activation of a single image and
/// returns the written paths. Each channel is min-max scaled on its own;
/// constant maps come out mid-gray.
pub fn dump_feature_maps<T: Scalar>(net: &mut Network<T>, x: &Tensor<T>, names: &[String], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if x.shape().n != 1 {
        return Err(Error::shape("dump", format!("expects a single image, got {}", x.shape())));
    }
    let was = net.capture;
    net.set_capture(true);
    let result = net.forward(x, Mode::Infer).and_then(|_| {
        let maps = names.iter().map(|n| net.activation(n).map(|t| (n, t))).collect::<Result<Vec<_>>>()?;
        fs::create_dir_all(out_dir)?;
        let mut paths = Vec::new();
        for (name, t) in maps {
            let file = out_dir.join(format!("{}.pgm", file_stem(name)));
            fs::write(&file, feature_grid_pgm(&t))?;
            paths.push(file);
        }
        Ok(paths)
    });
    net.set_capture(was);
    result
}

fn file_stem(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        match c {
            '+' => out.push_str("_plus_"),
            c if c.is_ascii_alphanumeric() || c == '.' || c == '-' => out.push(c),
            _ => out.push('_'),
        }
    }
    out
}

/// Binary PGM of all channels of sample 0 laid out on a near-square grid,
/// separated by 1-pixel black borders.
pub fn feature_grid_pgm<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let s = t.shape();
    let cols = (s.c as f64).sqrt().ceil() as usize;
    let rows = s.c.div_ceil(cols);
    let (gw, gh) = (cols * (s.w + 1) - 1, rows * (s.h + 1) - 1);
    let mut pix = vec![0u8; gw * gh];
    for c in 0..s.c {
        let plane = t.plane(0, c);
        let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        });
        let (ox, oy) = ((c % cols) * (s.w + 1), (c / cols) * (s.h + 1));
        for y in 0..s.h {
            for x in 0..s.w {
                let v = plane[y * s.w + x].as_f64();
                let g = if hi - lo > 1e-12 { ((v - lo) / (hi - lo) * 255.0).round() } else { 128.0 };
                pix[(oy + y) * gw + ox + x] = g as u8;
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&pix);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(classes: usize) -> Network<f64> {
        Network::new(NetworkSpec::with_widths(classes, [4, 8, 16], 14, 8).unwrap(), 3).unwrap()
    }

    #[test]
    fn paper_trace_rows() {
        let rows = NetworkSpec::paper(43).unwrap().trace().unwrap();
        let got: Vec<String> = rows.iter().map(|r| format!("{} {r}", r.row)).collect();
        assert_eq!(
            got,
            [
                "Conv1 56x56x64",
                "Conv2a,b 56x56x64",
                "Pool1 28x28x64",
                "Conv2c 28x28x64",
                "Conv3a 28x28x128",
                "Pool2 14x14x128",
                "Conv4a 14x14x256",
                "Pool3 7x7x256",
                "Conv4b 7x7x256",
                "AvgPool 1x1x256",
                "Dense1 512",
                "Dense2 43",
            ]
        );
    }

    #[test]
    fn rejects_single_class() {
        assert!(NetworkSpec::paper(1).is_err());
    }

    #[test]
    fn forward_matches_spec_trace() {
        let mut net = tiny(5);
        let x = Tensor::full(Shape::new(2, 3, 14, 14), 0.25);
        let out = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(out.probs.shape(), Shape::new(2, 5, 1, 1));
        assert_eq!(net.last_trace(), net.spec().trace().unwrap());
        for row in out.probs.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut net = tiny(3);
        assert!(net.forward(&Tensor::zeros(Shape::new(1, 3, 12, 14)), Mode::Infer).is_err());
    }

    #[test]
    fn duplicated_sample_gives_identical_rows_in_infer_mode() {
        let mut net = tiny(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = Tensor::<f64>::randn(Shape::new(1, 3, 14, 14), 1.0, &mut rng);
        let x = Tensor::stack(&[&one, &one]).unwrap();
        let p = net.forward(&x, Mode::Infer).unwrap().probs;
        assert_eq!(p.sample(0), p.sample(1));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = tiny(3);
        let b = tiny(3);
        for ((na, pa), (nb, pb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn activation_sums_and_unknown_names() {
        let mut net = tiny(3);
        net.set_capture(true);
        net.forward(&Tensor::full(Shape::new(1, 3, 14, 14), 0.5), Mode::Infer).unwrap();
        let f2 = net.activation("conv2a.F2").unwrap();
        let r1 = net.activation("conv2a.R1").unwrap();
        assert_eq!(net.activation("conv2a.F2+R1").unwrap(), f2.add(&r1).unwrap());
        assert_eq!(net.activation("conv2a.F2+conv2a.R1").unwrap(), f2.add(&r1).unwrap());
        assert!(matches!(net.activation("conv9.F1"), Err(Error::UnknownActivation(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.trcl");
        let src: Network<f32> = Network::new(NetworkSpec::with_widths(3, [4, 8, 16], 14, 8).unwrap(), 1).unwrap();
        src.save_checkpoint(&path).unwrap();
        let mut dst: Network<f32> = Network::new(NetworkSpec::with_widths(3, [4, 8, 16], 14, 8).unwrap(), 2).unwrap();
        dst.load_checkpoint(&path).unwrap();
        for ((_, a), (_, b)) in src.params().iter().zip(dst.params().iter()) {
            assert_eq!(a.value, b.value);
        }
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"TRCL");

        let mut other: Network<f32> = Network::new(NetworkSpec::with_widths(4, [4, 8, 16], 14, 8).unwrap(), 2).unwrap();
        assert!(other.load_checkpoint(&path).is_err());
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(dst.load_checkpoint(&path).is_err());
    }

    #[test]
    fn pgm_grid_layout() {
        let t = Tensor::<f32>::full(Shape::new(1, 64, 5, 5), 2.0);
        let pgm = feature_grid_pgm(&t);
        let header = b"P5\n47 47\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        // 64 constant tiles, each mid-gray
        assert_eq!(pgm[header.len()..].iter().filter(|&&p| p == 128).count(), 64 * 25);
    }

    #[test]
    fn file_stems_are_safe() {
        assert_eq!(file_stem("conv2a.F2+R1"), "conv2a.F2_plus_R1");
    }
}
