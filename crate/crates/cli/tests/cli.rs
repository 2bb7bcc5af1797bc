use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn trcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trcl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ppm(path: &Path, w: usize, h: usize, rgb: [u8; 3]) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for _ in 0..w * h {
        bytes.extend_from_slice(&rgb);
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn summarize_prints_table_and_totals() {
    let dir = tempfile::tempdir().unwrap();
    let o = trcl(&["summarize", "--classes", "43", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("Conv4b") && text.contains("7x7x256"));
    assert!(text.contains("closed-form total 6284587"));
    assert!(text.contains("registry total    6284587"));
    assert!(dir.path().join("summary.csv").exists());

    let o62 = stdout(&trcl(&["summarize", "--classes", "62"]));
    let last_row = |t: &str| t.lines().find(|l| l.starts_with("Dense2")).unwrap().to_string();
    assert!(last_row(&o62).ends_with("62"));
    assert!(last_row(&text).ends_with("43"));
}

#[test]
fn audit_passes() {
    let o = trcl(&["audit"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("D=64: 229376"));
    assert!(text.contains("k=5 r=1: 0"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn dump_writes_requested_maps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = trcl(&["dump", "--synthetic-class", "2", "--layers", "conv2a.F2,conv2a.R1,conv2a.sum1", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["conv2a.F2.pgm", "conv2a.R1.pgm", "conv2a.sum1.pgm"] {
        assert!(fs::metadata(dir.path().join(name)).unwrap().len() > 0, "{name}");
    }
}

#[test]
fn error_classes_map_to_exit_codes() {
    let code = |args: &[&str]| trcl(args).status.code().unwrap();
    assert_eq!(code(&["train", "--synthetic", "2x4", "--batch-size", "0"]), 2);
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["dump", "--synthetic-class", "0", "--layers", "nope"]), 2);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--data-root", dir.path().to_str().unwrap()]), 3);
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "colour=blue\n").unwrap();
    assert_eq!(code(&["--config", cfg.to_str().unwrap(), "audit"]), 2);
    assert_ne!(trcl(&["audit", "--no-such-flag"]).status.code(), Some(0));
}

#[test]
fn train_then_eval_reproduces_logged_top1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, "# small run\nepochs=1\nbatch_size=16\nseed=9\n").unwrap();
    let out = dir.path().join("run");
    let o = trcl(&[
        "--config",
        cfg.to_str().unwrap(),
        "train",
        "--synthetic",
        "2x10",
        "--batch-size",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let effective = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(effective.contains("batch_size=8\n") && effective.contains("epochs=1\n") && effective.contains("seed=9\n"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let logged = csv.lines().last().unwrap().split(',').nth(4).unwrap().to_string();
    let ckpt = out.join("last.trcl");
    let ev = trcl(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--synthetic", "2x10", "--seed", "9"]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let text = stdout(&ev);
    let top1 = text.split_whitespace().skip_while(|w| *w != "top1").nth(1).unwrap();
    assert_eq!(top1, logged);
}

#[test]
fn folder_training_reports_skipped_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    for (class, rgb) in [("0", [220, 20, 20]), ("1", [20, 20, 220])] {
        let d = data.join(class);
        fs::create_dir_all(&d).unwrap();
        for i in 0..4 {
            ppm(&d.join(format!("{i}.ppm")), 24, 24, rgb);
        }
    }
    fs::write(data.join("1").join("broken.ppm"), b"P6\n9 9\n255\n").unwrap();
    let out = dir.path().join("run");
    let o = trcl(&[
        "train",
        "--data-root",
        data.to_str().unwrap(),
        "--epochs",
        "1",
        "--val-fraction",
        "0.25",
        "--no-roi",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("skipped.txt")).unwrap().contains("broken.ppm"));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 3);
}
