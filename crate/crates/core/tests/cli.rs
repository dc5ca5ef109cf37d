use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seeds = [0]
[data]
source = "synthetic"
n_samples = 64
n_val = 16
n_test = 16
image_size = 16
[model]
embedding_dim = 8
input = { channels = 3, height = 16, width = 16 }
backbone = { in_channels = 3, widths = [4, 8] }
[trainer]
embedding_dim = 8
total_epochs = 6
finetune_epochs = 1
t_p = 2
min_remainder = 2
scoring_samples = 32
[wss.segmenter]
epochs = 1
"#;

fn dynsub(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynsub")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn train_eval_embed_report_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();

    let summary = ok(&dynsub(&["train", "--config", "tiny.toml", "--out", "runs"], d));
    assert_eq!(summary["completed"], serde_json::json!([0]));
    let seed = d.join("runs/tiny/seed-0");
    for f in ["history.jsonl", "metrics.json", "timing.json", "final.ckpt", "best.ckpt", "embeddings.bin", "wss.json", "history.svg"] {
        assert!(seed.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(seed.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 6);

    let report = ok(&dynsub(&["eval", "runs/tiny/seed-0/final.ckpt", "--config", "tiny.toml"], d));
    let nmi = report["nmi"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&nmi));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(seed.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["test"]["nmi"], report["nmi"]);

    let out = dynsub(&["embed", "runs/tiny/seed-0/final.ckpt", "--config", "tiny.toml", "--out", "e.bin"], d);
    assert!(out.status.success());
    let (n, dim, _, _) = dynsub::experiment::read_embeddings(&d.join("e.bin")).unwrap();
    assert_eq!((n, dim), (16, 8));

    let rebuilt = ok(&dynsub(&["report", "runs/tiny"], d));
    assert_eq!(rebuilt["metrics"]["nmi"], summary["metrics"]["nmi"]);

    // resuming from the first recorded best reproduces the full history
    let first = fs::read(seed.join("final.ckpt")).unwrap();
    fs::copy(seed.join("best.ckpt"), d.join("resume.ckpt")).unwrap();
    ok(&dynsub(&["train", "--config", "tiny.toml", "--out", "runs", "--resume", "resume.ckpt"], d));
    assert_eq!(fs::read_to_string(seed.join("history.jsonl")).unwrap(), history);
    assert_eq!(fs::read(seed.join("final.ckpt")).unwrap(), first);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(dynsub(&["--help"], d).status.code(), Some(0));
    assert_eq!(dynsub(&["train", "--bogus"], d).status.code(), Some(1));
    fs::write(d.join("bad.toml"), "[trainer]\nt_c = 0\n").unwrap();
    assert_eq!(dynsub(&["train", "--config", "bad.toml"], d).status.code(), Some(1));
    let missing = dynsub(&["eval", "nope.ckpt"], d);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}
