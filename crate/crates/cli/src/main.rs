//! `trcl`: build, audit, train, evaluate and inspect the dilated inner
//! residual traffic-sign classifier.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration, 3 data,
//! 4 numeric failure (non-finite loss or parameters).

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use config::{Resolver, SyntheticSpec};
use trcl_core::arch::{audit_identities, network_param_audit, receptive_extension};
use trcl_core::data::{
    generate_synthetic, generate_synthetic_heldout, load_folder_dataset, load_image, split_train_val, synthetic_sign,
    to_input_tensor, DatasetSplit, LoadOptions, INPUT_SIZE,
};
use trcl_core::network::{dump_feature_maps, Checkpoint, Network, NetworkSpec};
use trcl_core::trainer::{evaluate, train, TrainConfig, TrainOutputs};
use trcl_core::{Error, Shape, Tensor};

#[derive(Parser)]
#[command(name = "trcl", version, about = "Dilated inner residual CNN for traffic-sign classification")]
struct Cli {
    /// key=value file supplying defaults for any flag (flags win)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the layer table, per-stage parameter counts and totals
    Summarize {
        /// Number of output classes
        #[arg(long)]
        classes: Option<usize>,
        /// Directory for summary.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check receptive-field and parameter identities against brute force
    Audit {
        /// Directory for audit.txt
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network
    Train(TrainArgs),
    /// Evaluate a checkpoint
    Eval(EvalArgs),
    /// Write feature-map grids for one image
    Dump(DumpArgs),
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Dataset root: per-class subdirectories, or the image directory of a manifest
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// ';'-separated CSV with Filename and ClassId columns
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Generated dataset: C classes with N training images each, e.g. 8x250
    #[arg(long, value_name = "CxN")]
    synthetic: Option<SyntheticSpec>,
    /// Number of classes (inferred from the data when omitted)
    #[arg(long)]
    classes: Option<usize>,
    /// Validation fraction for folder datasets
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Crop images to annotated regions of interest (default)
    #[arg(long, overrides_with = "no_roi")]
    roi: bool,
    /// Use whole images, ignoring region annotations
    #[arg(long)]
    no_roi: bool,
    /// Seed for initialization, shuffling, splits and synthetic data
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory for metrics, checkpoints and the run manifest
    #[arg(long)]
    out: Option<PathBuf>,
    /// Log only the per-epoch metrics rows, not one row per iteration
    #[arg(long)]
    epoch_rows_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which part of the data to score: val (the split training validated on) or all
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Directory for eval.json
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    /// Checkpoint to load; a freshly initialized network is used when omitted
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Image file (.ppm or .png)
    #[arg(long, conflicts_with = "synthetic_class")]
    image: Option<PathBuf>,
    /// Render a synthetic sign of this class instead of reading an image
    #[arg(long)]
    synthetic_class: Option<usize>,
    /// Comma-separated activation names, e.g. conv2a.F2,conv2a.R1,conv2a.F2+R1
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Data(_) | Error::Decode { .. } | Error::Csv(_)) => 3,
        Some(Error::NonFinite(_)) => 4,
        Some(Error::UnknownActivation(_)) => 2,
        _ => 1,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TRCL_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("TRCL_THREADS={v} is not a count")))?;
        if n == 0 {
            return Err(Error::Config("TRCL_THREADS must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = Resolver::from_file(cli.config.as_deref())?;
    match cli.command {
        Command::Summarize { classes, out } => summarize(&mut cfg, classes, out),
        Command::Audit { out } => audit(&mut cfg, out),
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Eval(a) => cmd_eval(&mut cfg, a),
        Command::Dump(a) => cmd_dump(&mut cfg, a),
    }
}

fn summarize(cfg: &mut Resolver, classes: Option<usize>, out: Option<PathBuf>) -> Result<ExitCode> {
    let classes = cfg.get("classes", classes, 43)?;
    let out = cfg.get_opt("out", out.map(Display))?;
    let spec = NetworkSpec::paper(classes)?;
    println!("{:<10} {:>12}", "layer", "output");
    for row in spec.trace()? {
        println!("{:<10} {:>12}", row.row, row.to_string());
    }
    println!();
    let audit = network_param_audit(&spec)?;
    print!("{}", audit.report());
    if let Some(dir) = out {
        fs::create_dir_all(&dir.0)?;
        fs::write(dir.0.join("summary.csv"), audit.csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn audit(cfg: &mut Resolver, out: Option<PathBuf>) -> Result<ExitCode> {
    let out = cfg.get_opt("out", out.map(Display))?;
    let result = audit_identities(&[1, 3, 5], &[1, 2, 3], &[64, 128, 256]);
    let mut text = String::new();
    for c in &result.checks {
        text.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    text.push_str("\nsavings of a block over regular 5x5/7x7 skip kernels\n");
    for (d, s) in &result.savings {
        text.push_str(&format!("D={d}: {s}\n"));
    }
    text.push_str("\nper-kernel savings at D=64 (regular kernel of equal extent minus dilated)\n");
    for k in [1, 3, 5] {
        for r in [1, 2, 3] {
            let e = receptive_extension(k, r);
            text.push_str(&format!("k={k} r={r}: {}\n", e.delta * 64 * 64));
        }
    }
    let failed = result.checks.iter().filter(|c| !c.passed).count();
    text.push_str(&format!("\n{} checks, {} failed\n", result.checks.len(), failed));
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(&dir.0)?;
        fs::write(dir.0.join("audit.txt"), &text)?;
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// PathBuf wrapper so paths can pass through the resolver.
#[derive(Clone, Debug)]
struct Display(PathBuf);

impl std::fmt::Display for Display {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

impl std::str::FromStr for Display {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Display(PathBuf::from(s)))
    }
}

struct Splits {
    train: DatasetSplit,
    val: DatasetSplit,
    /// Report of undecodable files, when any were skipped.
    skipped: Option<String>,
}

/// Resolves the data flags and produces train/validation splits. Synthetic
/// data gets a separately generated held-out set (N/5 per class) as its
/// validation split.
fn load_data(cfg: &mut Resolver, d: &DataArgs, seed: u64) -> Result<Splits> {
    let synthetic = cfg.get_opt("synthetic", d.synthetic)?;
    let data_root = cfg.get_opt("data_root", d.data_root.clone().map(Display))?;
    let manifest = cfg.get_opt("manifest", d.manifest.clone().map(Display))?;
    let classes = cfg.get_opt("classes", d.classes)?;
    let roi_flag = if d.no_roi { Some(false) } else if d.roi { Some(true) } else { None };
    let use_roi = cfg.get("roi", roi_flag, true)?;
    let val_fraction = cfg.get("val_fraction", d.val_fraction, 0.1)?;
    match (synthetic, data_root) {
        (Some(_), Some(_)) => Err(Error::Config("--synthetic and --data-root are mutually exclusive".into()).into()),
        (None, None) => Err(Error::Config("one of --synthetic or --data-root is required".into()).into()),
        (Some(s), None) => {
            if classes.is_some_and(|c| c != s.classes) {
                return Err(Error::Config(format!("--classes disagrees with --synthetic {s}")).into());
            }
            let train = generate_synthetic(s.classes, s.per_class, seed)?;
            let val = generate_synthetic_heldout(s.classes, s.per_class, (s.per_class / 5).max(1), seed)?;
            Ok(Splits { train, val, skipped: None })
        }
        (None, Some(root)) => {
            let opts = LoadOptions { manifest: manifest.map(|m| m.0), use_roi, num_classes: classes };
            let all = load_folder_dataset(&root.0, &opts)?;
            let skipped = (!all.skipped.is_empty()).then(|| {
                eprintln!("warning: {} undecodable images skipped", all.skipped.len());
                all.skip_report()
            });
            let (train, val) = split_train_val(&all, val_fraction, seed)?;
            Ok(Splits { train, val, skipped })
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_run_files(dir: &Path, command: &str, seed: u64, cfg: &Resolver) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let config = cfg.render();
    fs::write(dir.join("config.txt"), &config)?;
    let version = format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    // content hash in the style of a git blob id
    let blob = format!("blob {}\0{}", version.len(), version);
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = serde_json::json!({
        "command": command,
        "started_unix": started,
        "seed": seed,
        "config_sha256": sha256_hex(config.as_bytes()),
        "code_version": version,
        "code_version_hash": sha256_hex(blob.as_bytes()),
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn cmd_train(cfg: &mut Resolver, a: TrainArgs) -> Result<ExitCode> {
    let defaults = TrainConfig::default();
    let seed = cfg.get("seed", a.data.seed, 0)?;
    let out = cfg.get("out", a.out.map(Display), Display(PathBuf::from("runs/latest")))?;
    let tc = TrainConfig {
        batch_size: cfg.get("batch_size", a.batch_size, defaults.batch_size)?,
        epochs: cfg.get("epochs", a.epochs, defaults.epochs)?,
        alpha0: cfg.get("lr", a.lr, defaults.alpha0)?,
        beta1: cfg.get("beta1", None, defaults.beta1)?,
        beta2: cfg.get("beta2", None, defaults.beta2)?,
        adam_eps: cfg.get("adam_eps", None, defaults.adam_eps)?,
        lr_floor: cfg.get("lr_floor", None, defaults.lr_floor)?,
        plateau_window: cfg.get("plateau_window", None, defaults.plateau_window)?,
        prefetch: cfg.get("prefetch", None, defaults.prefetch)?,
        log_every_iteration: cfg.get("log_every_iteration", a.epoch_rows_only.then_some(false), defaults.log_every_iteration)?,
        seed,
    };
    tc.validate()?;
    let data = load_data(cfg, &a.data, seed)?;
    write_run_files(&out.0, "train", seed, cfg)?;
    if let Some(report) = &data.skipped {
        fs::write(out.0.join("skipped.txt"), report)?;
    }
    if data.train.num_classes != data.val.num_classes {
        bail!(Error::Data("train and validation class counts differ".into()));
    }
    eprintln!(
        "training on {} images ({} classes), validating on {}, {} batches per epoch",
        data.train.len(),
        data.train.num_classes,
        data.val.len(),
        data.train.len().div_ceil(tc.batch_size)
    );
    let mut net = Network::<f32>::build(data.train.num_classes, seed)?;
    let outputs = TrainOutputs::in_dir(&out.0);
    let summary = train(&mut net, &data.train, &data.val, &tc, Some(&outputs), |m| {
        println!(
            "epoch {} iter {} train_loss {:.6} val_loss {:.6} top1 {:.4} top5 {:.4} lr {:e}",
            m.epoch,
            m.iteration,
            m.train_loss,
            m.val_loss.unwrap_or(f64::NAN),
            m.top1.unwrap_or(f64::NAN),
            m.top5.unwrap_or(f64::NAN),
            m.lr
        );
    })?;
    println!("best epoch {} ; outputs in {}", summary.best_epoch, out.0.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cfg: &mut Resolver, a: EvalArgs) -> Result<ExitCode> {
    let seed = cfg.get("seed", a.data.seed, 0)?;
    let batch_size = cfg.get("batch_size", a.batch_size, 32)?;
    let out = cfg.get_opt("out", a.out.map(Display))?;
    let ckpt_classes = Checkpoint::read(&a.checkpoint)
        .with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?
        .num_classes as usize;
    let data = load_data(cfg, &a.data, seed)?;
    let split = match a.split.as_str() {
        "val" => data.val,
        "train" => data.train,
        "all" => {
            let mut all = data.train;
            all.samples.extend(data.val.samples);
            all.name = "all".into();
            all
        }
        other => bail!(Error::Config(format!("unknown split {other:?}; use val, train or all"))),
    };
    if split.num_classes != ckpt_classes {
        bail!(Error::Data(format!("data has {} classes, checkpoint {}", split.num_classes, ckpt_classes)));
    }
    let mut net = Network::<f32>::build(ckpt_classes, 0)?;
    net.load_checkpoint(&a.checkpoint)?;
    let m = evaluate(&mut net, &split, batch_size)?;
    println!(
        "samples {} loss {} top1 {} top5 {} top1_error {} top5_error {}",
        m.samples,
        m.loss,
        m.top1,
        m.top5,
        1.0 - m.top1,
        1.0 - m.top5
    );
    if let Some(dir) = out {
        write_run_files(&dir.0, "eval", seed, cfg)?;
        let json = serde_json::json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "split": split.name,
            "samples": m.samples,
            "loss": m.loss,
            "top1": m.top1,
            "top5": m.top5,
        });
        fs::write(dir.0.join("eval.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_dump(cfg: &mut Resolver, a: DumpArgs) -> Result<ExitCode> {
    let seed = cfg.get("seed", a.seed, 0)?;
    let out = cfg.get("out", a.out.map(Display), Display(PathBuf::from("dumps")))?;
    let layers = cfg.get("layers", a.layers, "conv2a.F2,conv2a.R1,conv2a.F2+R1".to_string())?;
    let classes = match &a.checkpoint {
        Some(p) => Checkpoint::read(p).with_context(|| format!("reading checkpoint {}", p.display()))?.num_classes as usize,
        None => cfg.get("classes", a.classes, 43)?,
    };
    let x: Tensor<f32> = match (&a.image, a.synthetic_class) {
        (Some(p), _) => to_input_tensor(&load_image(p)?),
        (None, Some(c)) => {
            Tensor::from_vec(Shape::new(1, 3, INPUT_SIZE, INPUT_SIZE), synthetic_sign(c, 0, seed))?
        }
        (None, None) => bail!(Error::Config("dump needs --image or --synthetic-class".into())),
    };
    let mut net = Network::<f32>::build(classes, seed)?;
    if let Some(p) = &a.checkpoint {
        net.load_checkpoint(p)?;
    }
    let names: Vec<String> = layers.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        bail!(Error::Config("--layers is empty".into()));
    }
    let paths = dump_feature_maps(&mut net, &x, &names, &out.0)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}
