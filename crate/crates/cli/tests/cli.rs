use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_contrastdx"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn contrastdx")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

const TINY_CONFIG: &str = r#"{
  "version": 1,
  "seed": 11,
  "unet": {"levels": 2, "base_channels": 2, "latent_dim": 4, "patch_shape": [8, 8, 4], "norm_enabled": true},
  "train": {"epochs": 2, "pairs_per_epoch": 6, "batch_size": 3, "val_k": 3},
  "inference": {"k_grid": [1], "default_k": 3}
}"#;

fn gen(dir: &Path, n: [&str; 3]) {
    ok(&[
        "gen-data", "--out", s(dir), "--n-train", n[0], "--n-val", n[1], "--n-test", n[2], "--seed", "4", "--dims",
        "12,12,6",
    ]);
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_layout_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, ["4", "4", "4"]);
    gen(&b, ["4", "4", "4"]);
    assert_eq!(fs::read_dir(a.join("cases")).unwrap().count(), 12);
    let manifest = read_json(&a.join("manifest.json"));
    let entries = manifest.as_array().unwrap();
    assert_eq!(entries.len(), 12);
    let mut dirs: Vec<&str> = entries.iter().map(|e| e["dir"].as_str().unwrap()).collect();
    dirs.sort();
    dirs.dedup();
    assert_eq!(dirs.len(), 12);
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn unwritable_output_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain-file");
    fs::write(&file, "x").unwrap();
    let out = run(&["gen-data", "--out", s(&file.join("sub")), "--n-train", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    gen(&tmp.path().join("data"), ["4", "4", "4"]);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"version": 1, "trian": {}}"#).unwrap();
    let out = run(&["train", "--config", s(&cfg), "--data", s(&tmp.path().join("data")), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));
}

#[test]
fn malformed_case_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let case = tmp.path().join("broken");
    fs::create_dir_all(&case).unwrap();
    fs::write(case.join("meta.json"), "{}").unwrap();
    let out = run(&["predict", "--index", s(tmp.path()), "--checkpoint", s(tmp.path()), "--case", s(&case)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_on_tiny_model() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, run_dir) = (root.join("data"), root.join("run"));
    gen(&data, ["8", "6", "6"]);
    let cfg = root.join("cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();

    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run_dir)]);
    let log = fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "lr", "train_loss", "val_auc"] {
            assert!(r.get(key).is_some(), "{key}");
        }
    }
    assert_eq!(read_json(&run_dir.join("config.resolved.json"))["seed"], 11);
    assert!(run_dir.join("checkpoint/manifest.json").exists());

    let ck = run_dir.join("checkpoint");
    let (i1, i2, i3) = (root.join("idx1"), root.join("idx2"), root.join("idx3"));
    ok(&["build-index", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&i1)]);
    ok(&["tune-k", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&i2), "--index", s(&i1)]);
    ok(&["calibrate", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&i3), "--index", s(&i2)]);
    let built = read_json(&i1.join("index.json"));
    assert_eq!(built["entries"].as_array().unwrap().len(), 14);
    assert_eq!(fs::read(i1.join("codes.bin")).unwrap(), fs::read(i3.join("codes.bin")).unwrap());
    let index = read_json(&i3.join("index.json"));
    assert_eq!(index["k"], 1);
    assert!(index["tau"].as_f64().unwrap() > 0.0);

    // a support member queried against the index finds itself
    let manifest = read_json(&data.join("manifest.json"));
    let member = manifest
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["split"] == "train")
        .unwrap()["dir"]
        .as_str()
        .unwrap()
        .to_string();
    let member_meta = read_json(&data.join(&member).join("meta.json"));
    let explain = root.join("explain");
    let pred_path = root.join("pred.json");
    let out = ok(&[
        "predict", "--index", s(&i3), "--checkpoint", s(&ck), "--case", s(&data.join(&member)), "--out",
        s(&pred_path), "--explain", s(&explain),
    ]);
    let pred: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(pred, read_json(&pred_path));
    for key in ["query_id", "label", "score", "confident", "d_min", "tau", "neighbors"] {
        assert!(pred.get(key).is_some(), "{key}");
    }
    assert_eq!(pred["d_min"], 0.0);
    assert_eq!(pred["confident"], true);
    assert_eq!(pred["label"], member_meta["label"]);
    let k = pred["neighbors"].as_array().unwrap().len();
    let pngs = fs::read_dir(&explain)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 1 + k);
    assert!(explain.join("query.png").exists() && explain.join("support_1.png").exists());

    let eval = root.join("eval");
    ok(&["evaluate", "--index", s(&i3), "--checkpoint", s(&ck), "--data", s(&data), "--split", "test", "--out", s(&eval)]);
    let m = read_json(&eval.join("metrics.json"));
    for key in ["auc", "accuracy", "recall", "precision", "f1"] {
        let v = m[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    let csv = fs::read_to_string(eval.join("roc.csv")).unwrap();
    let fpr: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(fpr.windows(2).all(|w| w[1] >= w[0]));

    // single-class split
    let one = root.join("one");
    gen(&one, ["8", "6", "1"]);
    let out = run(&["evaluate", "--index", s(&i3), "--checkpoint", s(&ck), "--data", s(&one), "--split", "test", "--out", s(&root.join("e2"))]);
    assert_eq!(out.status.code(), Some(3));
}
