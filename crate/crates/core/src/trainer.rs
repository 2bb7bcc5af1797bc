//! Loss, optimizer, learning-rate schedule, training loop and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{for_each_batch, mix, DatasetSplit};
use crate::error::{Error, Result};
use crate::layers::{softmax_backward, Mode, ParamMuts};
use crate::network::Network;
use crate::tensor::{Scalar, Shape, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;
pub const LR_DECAY: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_floor: f64,
    pub plateau_window: usize,
    pub seed: u64,
    /// Append a CSV row after every iteration, not only after each epoch.
    pub log_every_iteration: bool,
    /// Batches loaded ahead of the optimizer.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 30,
            alpha0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-7,
            lr_floor: 1e-12,
            plateau_window: 3,
            seed: 0,
            log_every_iteration: true,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.alpha0.is_nan() || self.alpha0 <= self.lr_floor {
            return bad(format!("learning rate {} must exceed the floor {}", self.alpha0, self.lr_floor));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.plateau_window == 0 {
            return bad("plateau window must be at least 1".into());
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub iteration: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation fields are absent on per-iteration rows.
    pub val_loss: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "iteration,epoch,train_loss,val_loss,top1,top5,lr";

impl Metrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.epoch,
            self.train_loss,
            opt(self.val_loss),
            opt(self.top1),
            opt(self.top5),
            self.lr
        )
    }
}

/// One-hot rows, shape (n, classes, 1, 1).
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(Shape::new(labels.len(), classes, 1, 1));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + l] = T::one();
    }
    Ok(t)
}

fn check_targets<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch { op: "cross entropy", lhs: pred.shape(), rhs: target.shape() });
    }
    let c = target.shape().sample_len();
    for (i, row) in target.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        if ones != 1 || row.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Data(format!("target row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// `−(1/B) Σ_b (1/C) Σ_j [y log ŷ + (1−y) log(1−ŷ)]` with ŷ clamped to
/// `[1e−7, 1 − 1e−7]`.
pub fn cross_entropy<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_targets(pred, target)?;
    let n = pred.shape().n as f64;
    let c = pred.shape().sample_len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = p.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = y.as_f64();
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / (n * c))
}

/// Gradient of [`cross_entropy`] with respect to the probabilities; zero
/// where the clamp is active.
pub fn cross_entropy_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_targets(pred, target)?;
    let scale = 1.0 / (pred.shape().n * pred.shape().sample_len()) as f64;
    pred.zip_with(target, "cross entropy grad", |p, y| {
        let (p, y) = (p.as_f64(), y.as_f64());
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
            return T::zero();
        }
        T::of(-scale * (y / p - (1.0 - y) / (1.0 - p)))
    })
}

/// Loss gradient with respect to the pre-softmax logits.
pub fn logits_grad<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    softmax_backward(probs, &cross_entropy_grad(probs, target)?)
}

/// Adam with bias-corrected moments. Moments are matched to parameters by
/// position, so the parameter list order must be stable between steps.
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: ParamMuts<'_, T>, alpha: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Consistency(format!("adam holds {} moments for {} parameters", self.m.len(), params.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (T::of(self.beta1), T::of(self.beta2), T::of(self.eps));
        let (one, step, c2) = (T::one(), T::of(alpha / c1), T::of(c2));
        for ((_, p), (m, v)) in params.into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if m.shape() != p.shape() {
                return Err(Error::ShapeMismatch { op: "adam", lhs: m.shape(), rhs: p.shape() });
            }
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (one - b1) * g[i];
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (one - b2) * g[i] * g[i];
                let v_hat = v.data()[i] / c2;
                w[i] -= step * m.data()[i] / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Next learning rate given the monitored losses, oldest first. Fewer than
/// `window` losses keep `alpha`. The rate drops by ×0.1 when none of the
/// latest `window − 1` losses beats the one `window` evaluations back,
/// unless the drop would reach the floor.
pub fn lr_update_with(history: &[f64], alpha: f64, window: usize, floor: f64) -> f64 {
    if window == 0 || history.len() < window {
        return alpha;
    }
    let tail = &history[history.len() - window..];
    let reference = tail[0];
    let improved = tail[1..].iter().any(|&l| l < reference);
    if improved || LR_DECAY * alpha <= floor {
        alpha
    } else {
        LR_DECAY * alpha
    }
}

pub fn lr_update(history: &[f64], alpha: f64) -> f64 {
    lr_update_with(history, alpha, 3, 1e-12)
}

/// Plateau schedule state. After a decay the history restarts, so the next
/// decay needs a fresh full window.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub alpha: f64,
    pub window: usize,
    pub floor: f64,
    history: Vec<f64>,
}

impl LrSchedule {
    pub fn new(alpha: f64, window: usize, floor: f64) -> Self {
        LrSchedule { alpha, window, floor, history: Vec::new() }
    }

    pub fn observe(&mut self, loss: f64) -> f64 {
        self.history.push(loss);
        let next = lr_update_with(&self.history, self.alpha, self.window, self.floor);
        if next != self.alpha {
            self.history.clear();
        }
        self.alpha = next;
        next
    }
}

pub fn batches_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

/// Shuffled batches for one epoch; the order depends only on (seed, epoch).
pub fn epoch_batches(samples: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 0xe90c)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Whether `target` is among the `k` most probable classes; equal
/// probabilities rank the lower class index first.
pub fn in_top_k<T: Scalar>(probs: &[T], target: usize, k: usize) -> bool {
    let pt = probs[target];
    let rank = probs.iter().enumerate().filter(|&(j, &p)| p > pt || (p == pt && j < target)).count();
    rank < k
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub samples: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

/// Accumulates predictions batch by batch.
#[derive(Default)]
struct Tally {
    n: usize,
    loss_sum: f64,
    top1: usize,
    top5: usize,
}

impl Tally {
    fn add<T: Scalar>(&mut self, probs: &Tensor<T>, labels: &[usize]) -> Result<()> {
        let c = probs.shape().sample_len();
        let target = one_hot::<T>(labels, c)?;
        self.loss_sum += cross_entropy(probs, &target)? * labels.len() as f64;
        for (row, &l) in probs.data().chunks(c).zip(labels) {
            self.top1 += in_top_k(row, l, 1) as usize;
            self.top5 += in_top_k(row, l, 5) as usize;
        }
        self.n += labels.len();
        Ok(())
    }

    fn finish(&self) -> EvalMetrics {
        let n = self.n.max(1) as f64;
        EvalMetrics { samples: self.n, loss: self.loss_sum / n, top1: self.top1 as f64 / n, top5: self.top5 as f64 / n }
    }
}

pub fn evaluate_probs<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<EvalMetrics> {
    let mut t = Tally::default();
    t.add(probs, labels)?;
    Ok(t.finish())
}

/// Inference-mode loss and top-k accuracy over a whole split.
pub fn evaluate(net: &mut Network<f32>, split: &DatasetSplit, batch_size: usize) -> Result<EvalMetrics> {
    if split.is_empty() {
        return Err(Error::Data(format!("split {} is empty", split.name)));
    }
    check_classes(net, split)?;
    let batches: Vec<Vec<usize>> = (0..split.len()).collect::<Vec<_>>().chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    let mut tally = Tally::default();
    for_each_batch(split, &batches, 2, |x, labels| {
        let out = net.forward(&x, Mode::Infer)?;
        tally.add(&out.probs, &labels)
    })?;
    Ok(tally.finish())
}

fn check_classes(net: &Network<f32>, split: &DatasetSplit) -> Result<()> {
    if split.num_classes != net.num_classes() {
        return Err(Error::Data(format!(
            "split {} has {} classes, network has {}",
            split.name,
            split.num_classes,
            net.num_classes()
        )));
    }
    Ok(())
}

/// Where the training loop writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub metrics_csv: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        TrainOutputs {
            metrics_csv: dir.join("metrics.csv"),
            best_checkpoint: dir.join("best.trcl"),
            last_checkpoint: dir.join("last.trcl"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// One entry per epoch.
    pub epochs: Vec<Metrics>,
    pub best_epoch: usize,
    pub batches_per_epoch: usize,
}

/// Trains `net` on `train`, validating on `val` after every epoch.
///
/// Writes the metrics CSV and checkpoints (best validation loss and last
/// epoch) when `outputs` is given. `on_epoch` sees each epoch's row.
pub fn train(
    net: &mut Network<f32>,
    train: &DatasetSplit,
    val: &DatasetSplit,
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
    mut on_epoch: impl FnMut(&Metrics),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    check_classes(net, train)?;
    check_classes(net, val)?;
    let classes = net.num_classes();
    let mut adam = Adam::<f32>::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut sched = LrSchedule::new(cfg.alpha0, cfg.plateau_window, cfg.lr_floor);
    let mut csv = format!("{METRICS_HEADER}\n");
    let flush = |csv: &str| -> Result<()> {
        if let Some(o) = outputs {
            fs::write(&o.metrics_csv, csv)?;
        }
        Ok(())
    };
    flush(&csv)?;
    let mut iteration = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize)> = None;
    let nb = batches_per_epoch(train.len(), cfg.batch_size);
    net.zero_grad();
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let alpha = sched.alpha;
        for_each_batch(train, &batches, cfg.prefetch, |x, labels| {
            let out = net.forward(&x, Mode::Train)?;
            let target = one_hot::<f32>(&labels, classes)?;
            let loss = cross_entropy(&out.probs, &target)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at iteration {}", iteration + 1)));
            }
            let g = logits_grad(&out.probs, &target)?;
            drop(out);
            net.backward(&g)?;
            adam.step(net.params_mut(), alpha)?;
            net.zero_grad();
            iteration += 1;
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
            if cfg.log_every_iteration {
                let row = Metrics { iteration, epoch, train_loss: loss, val_loss: None, top1: None, top5: None, lr: alpha };
                writeln!(csv, "{}", row.csv_row()).expect("string write");
            }
            Ok(())
        })?;
        if net.params().iter().any(|(_, p)| !p.value.all_finite()) {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let ev = evaluate(net, val, cfg.batch_size)?;
        let row = Metrics {
            iteration,
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss: Some(ev.loss),
            top1: Some(ev.top1),
            top5: Some(ev.top5),
            lr: alpha,
        };
        writeln!(csv, "{}", row.csv_row()).expect("string write");
        flush(&csv)?;
        if let Some(o) = outputs {
            net.save_checkpoint(&o.last_checkpoint)?;
            if best.is_none_or(|(l, _)| ev.loss < l) {
                net.save_checkpoint(&o.best_checkpoint)?;
            }
        }
        if best.is_none_or(|(l, _)| ev.loss < l) {
            best = Some((ev.loss, epoch));
        }
        sched.observe(ev.loss);
        on_epoch(&row);
        epochs.push(row);
    }
    Ok(TrainSummary { epochs, best_epoch: best.map_or(0, |b| b.1), batches_per_epoch: nb })
}
