use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn countlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_countlab"))
        .current_dir(dir)
        .env_remove("COUNTLAB_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn only_run(root: &Path) -> PathBuf {
    let runs: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1, "{runs:?}");
    runs[0].clone()
}

const SMALL: &[&str] = &["train", "--d", "4", "--heads", "2", "--epochs", "2"];

#[test]
fn train_probe_and_reuse() {
    let tmp = tempfile::tempdir().unwrap();
    let first = ok(&countlab(tmp.path(), &[&["--out", "o"], SMALL].concat()));
    assert!(first.starts_with("train: trained"), "{first}");
    assert_eq!(first.lines().count(), 1);
    let again = ok(&countlab(tmp.path(), &[&["--out", "o"], SMALL].concat()));
    assert!(again.starts_with("train: reused"), "{again}");

    let run = only_run(&tmp.path().join("o/train"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"]["state"], "completed");
    assert_eq!(manifest["checkpoints"].as_array().unwrap().len(), 2);

    let run_s = run.to_str().unwrap();
    ok(&countlab(tmp.path(), &["probe", "--run", run_s, "--checkpoint", "last", "--subsets", "upto2"]));
    let pairs = fs::read_to_string(run.join("exports/probe_epoch_002_pairs.csv")).unwrap();
    assert_eq!(pairs.lines().next().unwrap(), "i,j,l_acc,l_acc_syntactic,roc_auc,s_acc");
    assert_eq!(pairs.lines().count(), 1 + 4);

    ok(&countlab(tmp.path(), &["evolution", "--run", run_s]));
    let before = fs::read(run.join("exports/evolution.csv")).unwrap();
    ok(&countlab(tmp.path(), &["evolution", "--run", run_s]));
    assert_eq!(before, fs::read(run.join("exports/evolution.csv")).unwrap());
}

#[test]
fn gen_data_writes_splits() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&countlab(tmp.path(), &["gen-data", "--seed", "7", "--out", "data"]));
    for split in ["train", "val", "test"] {
        assert!(tmp.path().join(format!("data/{split}.txt")).exists());
        assert!(tmp.path().join(format!("data/{split}_counts.csv")).exists());
    }
    let n = fs::read_to_string(tmp.path().join("data/val.txt")).unwrap().lines().count();
    assert_eq!(n, 1500);
}

#[test]
fn config_file_and_env_override() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "out = \"ignored\"\nseed = 3\n[train]\nd = 4\nheads = 2\nepochs = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_countlab"))
        .current_dir(tmp.path())
        .env("COUNTLAB_OUT", "envout")
        .args(["--config", "c.toml", "train"])
        .output()
        .unwrap();
    ok(&out);
    let run = only_run(&tmp.path().join("envout/train"));
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("d4-a2-h2-ln-s3-"));
    assert!(!tmp.path().join("ignored").exists());
}

#[test]
fn errors_are_structured() {
    let tmp = tempfile::tempdir().unwrap();
    let out = countlab(tmp.path(), &["train", "--dropout", "0.1"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["command"], "train");
    assert!(err["message"].as_str().unwrap().contains("dropout"));

    let out = countlab(tmp.path(), &["probe", "--run", "missing"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["status"], "error");

    let out = countlab(tmp.path(), &["sweep-grid", "--cells", "6x4"]);
    assert!(!out.status.success());
}

#[test]
fn minimal_verify_reports_perfect_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let line = ok(&countlab(tmp.path(), &["--out", "o", "minimal-verify", "--samples", "200"]));
    assert!(line.contains("joint 1.0000"), "{line}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("o/minimal/report.json")).unwrap()).unwrap();
    assert_eq!(report["closed_form_agreement"], 1.0);
}
