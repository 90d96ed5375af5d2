use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const DATA_CFG: &str = "per_class = 10\ntest_per_class = 5\nimage_size = 8\nmarks = 1\nmark_size = 2\nfrequency = 4\npattern_amplitude = 0.5\n";
const ARCH: &str = "patch_size = 2\ndepth = 1\nheads = 2\ndim = 8\n";

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(root.join("data.cfg"), DATA_CFG).unwrap();
        fs::write(root.join("train.cfg"), format!("{ARCH}epochs = 2\nlr = 0.05\nbatch = 8\nmomentum = 0.9\n")).unwrap();
        fs::write(root.join("lethe.cfg"), format!("{ARCH}ef = 1\ner = 1\nlr = 0.01\nbatch = 8\ntau = 0.5\nratio = 0.25\n")).unwrap();
        fs::write(root.join("retrain.cfg"), format!("{ARCH}epochs = 2\nlr = 0.05\nbatch = 8\nmomentum = 0.9\n")).unwrap();
        fs::write(root.join("eval.cfg"), ARCH).unwrap();
        Workspace { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_lethevit"))
            .args(args)
            .current_dir(&self.root)
            .env_remove("LETHE_SEED")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    /// gen-data → train → unlearn(lethevit) → unlearn(retrain) → evaluate.
    fn pipeline(&self, seed: &str) {
        let s = format!("seed={seed}");
        self.ok(&["gen-data", "--config", "data.cfg", "--set", &s, "--out", "data"]);
        self.ok(&["train", "--config", "train.cfg", "--set", &s, "--data", "data", "--out", "run"]);
        self.ok(&[
            "unlearn", "--method", "lethevit", "--config", "lethe.cfg", "--set", &s, "--data", "data", "--model",
            "run/original.ltvt", "--out", "run",
        ]);
        self.ok(&[
            "unlearn", "--method", "retrain", "--config", "retrain.cfg", "--set", &s, "--data", "data", "--out", "run",
        ]);
        self.ok(&[
            "evaluate", "--config", "eval.cfg", "--set", &s, "--data", "data", "--retrain", "run/retrain.ltvt",
            "--model", "LetheViT=run/lethevit.ltvt", "--model", "Original=run/original.ltvt", "--out", "run",
        ]);
    }
}

fn sha(path: &Path) -> String {
    format!("{:x}", Sha256::digest(fs::read(path).unwrap()))
}

fn manifests(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn files_under(dir: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.insert(p);
        }
    }
    out
}

#[test]
fn full_pipeline_writes_reports_and_manifests() {
    let ws = Workspace::new();
    ws.pipeline("3");

    let report = fs::read_to_string(ws.path("run/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "method,seed,FA,RA,TA,MIA,dFA,dRA,dTA,dMIA,AG");
    assert!(lines[1].starts_with("Retrain,3,"));
    assert!(lines[1].ends_with(",0.0000,0.0000,0.0000,0.0000,0.0000"));
    assert!(lines[2].starts_with("LetheViT,3,"));
    assert!(lines[3].starts_with("Original,3,"));

    let records = manifests(&ws.path("run/manifests.jsonl"));
    let commands: Vec<&str> = records.iter().map(|r| r["command"].as_str().unwrap()).collect();
    assert_eq!(commands, ["train", "unlearn", "unlearn", "evaluate"]);
    let lethe = &records[1];
    assert_eq!(lethe["method"], "lethevit");
    assert!(lethe["phase_seconds"]["forget"].as_f64().unwrap() >= 0.0);
    assert!(lethe["phase_seconds"]["retain"].as_f64().unwrap() >= 0.0);
    assert_eq!(lethe["config"]["tau"], "0.5");
    assert_eq!(lethe["config"]["mask_type"], "zero");
    assert_eq!(lethe["config"]["seed"], "3");
    let out_key = ws.path("run/lethevit.ltvt").strip_prefix(&ws.root).unwrap().display().to_string();
    assert_eq!(
        lethe["outputs"][out_key.as_str()].as_str().unwrap(),
        sha(&ws.path("run/lethevit.ltvt"))
    );
    assert_eq!(manifests(&ws.path("data/manifests.jsonl")).len(), 1);

    let summary = ws.ok(&["report", "--dir", "run"]);
    let text = String::from_utf8(summary.stdout).unwrap();
    assert!(text.starts_with("method,seconds,forget_seconds,retain_seconds,AG\n"));
    assert!(text.lines().any(|l| l.starts_with("LetheViT,")));
    assert_eq!(fs::read_to_string(ws.path("run/summary.csv")).unwrap(), text);
}

#[test]
fn pipeline_is_byte_identical_under_a_fixed_seed() {
    let a = Workspace::new();
    let b = Workspace::new();
    a.pipeline("7");
    b.pipeline("7");
    for file in ["data/train.ltds", "data/split.json", "run/original.ltvt", "run/lethevit.ltvt", "run/report.csv"] {
        assert_eq!(fs::read(a.path(file)).unwrap(), fs::read(b.path(file)).unwrap(), "{file}");
    }
    // rerunning evaluate in place rewrites the same bytes
    let before = fs::read(a.path("run/report.csv")).unwrap();
    a.ok(&[
        "evaluate", "--config", "eval.cfg", "--set", "seed=7", "--data", "data", "--retrain", "run/retrain.ltvt",
        "--model", "LetheViT=run/lethevit.ltvt", "--model", "Original=run/original.ltvt", "--out", "run",
    ]);
    assert_eq!(fs::read(a.path("run/report.csv")).unwrap(), before);
}

#[test]
fn sweep_mask_emits_ten_rows() {
    let ws = Workspace::new();
    ws.ok(&["gen-data", "--config", "data.cfg", "--set", "seed=1", "--out", "data"]);
    ws.ok(&["train", "--config", "train.cfg", "--set", "seed=1", "--data", "data", "--out", "run"]);
    ws.ok(&[
        "sweep-mask", "--config", "eval.cfg", "--set", "seed=1", "--data", "data", "--model", "run/original.ltvt",
        "--out", "sweep",
    ]);
    let csv = fs::read_to_string(ws.path("sweep/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "ratio,mask_type,ta,mia");
    assert_eq!(lines.len(), 11);
    assert!(lines[1].starts_with("0.00,zero,"));
    assert!(lines[2].starts_with("0.00,gaussian,"));
    assert_eq!(lines[1].split_once(",zero,").unwrap().1, lines[2].split_once(",gaussian,").unwrap().1);
}

#[test]
fn zero_epoch_lethevit_reproduces_the_original_checkpoint() {
    let ws = Workspace::new();
    ws.ok(&["gen-data", "--config", "data.cfg", "--set", "seed=2", "--out", "data"]);
    ws.ok(&["train", "--config", "train.cfg", "--set", "seed=2", "--data", "data", "--out", "run"]);
    ws.ok(&[
        "unlearn", "--method", "lethevit", "--config", "lethe.cfg", "--set", "seed=2", "--set", "ef=0", "--set",
        "er=0", "--data", "data", "--model", "run/original.ltvt", "--out", "noop",
    ]);
    assert_eq!(sha(&ws.path("noop/lethevit.ltvt")), sha(&ws.path("run/original.ltvt")));
}

#[test]
fn missing_config_key_exits_with_usage_code() {
    let ws = Workspace::new();
    ws.ok(&["gen-data", "--config", "data.cfg", "--set", "seed=1", "--out", "data"]);
    fs::write(ws.path("nolr.cfg"), "epochs = 1\nbatch = 4\nseed = 1\n").unwrap();
    let out = ws.run(&["train", "--config", "nolr.cfg", "--data", "data", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("'lr'"));
    assert!(!ws.path("run").exists());
}

#[test]
fn unknown_method_lists_the_valid_ones() {
    let ws = Workspace::new();
    let out = ws.run(&["unlearn", "--method", "salun", "--set", "seed=1", "--data", "data", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for m in ["lethevit", "retrain", "ft", "ga", "rl"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new();
    let out = ws.run(&["gen-data", "--set", "seed=1", "--set", "per_clas=3", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("per_clas"));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let ws = Workspace::new();
    let out = ws.run(&["gen-data", "--config", "data.cfg", "--out", "a"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("'seed'"));

    let out = Command::new(env!("CARGO_BIN_EXE_lethevit"))
        .args(["gen-data", "--config", "data.cfg", "--out", "env"])
        .current_dir(&ws.root)
        .env("LETHE_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    ws.ok(&["gen-data", "--config", "data.cfg", "--set", "seed=5", "--out", "flag"]);
    assert_eq!(fs::read(ws.path("env/train.ltds")).unwrap(), fs::read(ws.path("flag/train.ltds")).unwrap());
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let ws = Workspace::new();
    ws.ok(&["gen-data", "--config", "data.cfg", "--set", "seed=1", "--out", "data"]);
    fs::write(ws.path("bad.ltvt"), b"LTVT garbage").unwrap();
    let out = ws.run(&[
        "unlearn", "--method", "ft", "--config", "retrain.cfg", "--set", "seed=1", "--data", "data", "--model",
        "bad.ltvt", "--out", "run",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));
}

#[test]
fn divergence_is_a_runtime_failure() {
    let ws = Workspace::new();
    ws.ok(&["gen-data", "--config", "data.cfg", "--set", "seed=1", "--out", "data"]);
    let out = ws.run(&[
        "train", "--config", "train.cfg", "--set", "seed=1", "--set", "lr=1e200", "--data", "data", "--out", "run",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
}

#[test]
fn commands_only_write_inside_their_output_directory() {
    let ws = Workspace::new();
    ws.ok(&["gen-data", "--config", "data.cfg", "--set", "seed=4", "--out", "data"]);
    let before = files_under(&ws.root);
    ws.ok(&["train", "--config", "train.cfg", "--set", "seed=4", "--data", "data", "--out", "run"]);
    let after = files_under(&ws.root);
    let added: Vec<&PathBuf> = after.difference(&before).collect();
    assert!(!added.is_empty());
    assert!(added.iter().all(|p| p.starts_with(ws.path("run"))), "{added:?}");
    for p in &before {
        assert!(after.contains(p));
    }
}
