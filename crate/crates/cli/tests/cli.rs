use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use enadpool::graphdata::{cycle, path, star, write_tu_dataset};
use enadpool::GraphCollection;

const SMALL_MODEL: &str = r#"{"n_max": 16, "gcn_width": 4, "hops": 2, "hidden_main": 8, "hidden_aux": 8}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enadpool"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes cycles (class 0) and stars (class 1) as `root/TOY/TOY_*.txt`.
fn toy_dataset(root: &Path) -> PathBuf {
    let mut graphs = Vec::new();
    for n in 5..11 {
        graphs.push(cycle(n, 0).unwrap());
        graphs.push(star(n - 1, 1).unwrap());
    }
    let dir = root.join("TOY");
    write_tu_dataset(&GraphCollection::new("TOY", graphs).unwrap(), &dir, "TOY").unwrap();
    dir
}

fn small_config(root: &Path) -> PathBuf {
    let p = root.join("small.json");
    fs::write(&p, SMALL_MODEL).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_toy(root: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let data = toy_dataset(root);
    let config = small_config(root);
    let out = root.join("out");
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--config",
        s(&config),
        "--folds",
        "2",
        "--epochs",
        "3",
        "--lr",
        "0.001",
        "--out-dir",
        s(&out),
    ];
    args.extend_from_slice(extra);
    (run(&args), out)
}

#[test]
fn train_writes_manifest_curves_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = train_toy(dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.contains("over 2 fold(s)") && line.contains('±'), "{line}");

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let fp = manifest["dataset"]["fingerprint"].as_str().unwrap();
    assert_eq!(fp.len(), 64);
    assert!(fp.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(manifest["train"]["learning_rate"], 0.001);
    assert_eq!(manifest["model"]["gcn_width"], 4);

    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.starts_with("fold,epoch,train_loss,val_acc\n"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("fold,best_val_acc,best_epoch\n"));
    assert_eq!(summary.lines().count(), 3);
    assert!(out.join("fold0.ckpt").is_file() && out.join("fold1.ckpt").is_file());
}

#[test]
fn training_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (oa, out_a) = train_toy(a.path(), &["--seed", "3"]);
    let (ob, out_b) = train_toy(b.path(), &["--seed", "3", "--parallel-folds", "2"]);
    assert!(oa.status.success() && ob.status.success());
    assert_eq!(
        fs::read_to_string(out_a.join("curves.csv")).unwrap(),
        fs::read_to_string(out_b.join("curves.csv")).unwrap()
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let config = dir.path().join("run.json");
    fs::write(
        &config,
        r#"{"n_max": 16, "gcn_width": 4, "hops": 1, "hidden_main": 8, "hidden_aux": 8,
            "mode": "E", "max_epochs": 2, "folds": 3}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "train", "--data", s(&data), "--config", s(&config), "--hops", "2", "--fold", "1", "--out-dir", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["model"]["mode"], "E");
    assert_eq!(manifest["model"]["hops"], 2);
    assert_eq!(manifest["train"]["max_epochs"], 2);
    assert_eq!(manifest["train"]["folds"], 3);
    assert_eq!(manifest["fold"], 1);
    assert!(out.join("fold1.ckpt").is_file());
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let o = run(&["train", "--data", "/nonexistent/PROTEINS"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/PROTEINS"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"lr": 0.1}"#).unwrap();
    let o = run(&["train", "--data", s(&data), "--config", s(&config)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`lr`"));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(run(&["train", "--mode", "X", "--data", "."]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn output_directory_may_not_be_inside_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let inside = data.join("runs");
    let o = run(&["train", "--data", s(&data), "--out-dir", s(&inside)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!inside.exists());
}

#[test]
fn gradcheck_passes_for_soft_and_ne() {
    for mode in ["soft", "NE"] {
        let o = run(&["gradcheck", "--mode", mode]);
        assert!(o.status.success(), "{}", stdout(&o));
        let text = stdout(&o);
        assert!(text.starts_with(&format!("PASS mode {mode}: max relative error")), "{text}");
    }
}

#[test]
fn corrupted_backward_rule_fails_gradcheck() {
    let o = run(&["gradcheck", "--mode", "NE", "--fault-scale", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("FAIL"));
}

#[test]
fn inspect_masks_on_a_path_matches_bfs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("PATH");
    write_tu_dataset(&GraphCollection::new("PATH", vec![path(4, 0).unwrap()]).unwrap(), &data, "PATH").unwrap();
    let o = run(&["inspect-masks", "--data", s(&data), "--graph", "0", "--hops", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("agrees with BFS distances for h <= 3: yes"), "{text}");
    // Distance 3 joins the two path ends only.
    let hop3: Vec<&str> = text.split("hop 3").nth(1).unwrap().lines().skip(2).take(4).collect();
    let u3: Vec<String> = hop3.iter().map(|l| l.split('|').nth(1).unwrap().trim().to_string()).collect();
    assert_eq!(u3, ["0 0 0 1", "0 0 0 0", "0 0 0 0", "1 0 0 0"]);
}

#[test]
fn inspect_masks_prints_one_block_per_hop() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let o = run(&["inspect-masks", "--data", s(&data), "--graph", "0", "--hops", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("hop ")).count(), 3);
    assert!(text.contains("R_2") && text.contains("U_2") && text.contains("T_2"));
}

#[test]
fn inspect_masks_rejects_out_of_range_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let o = run(&["inspect-masks", "--data", s(&data), "--graph", "99"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("0..=11"), "{}", stderr(&o));
}

#[test]
fn eval_reproduces_the_logged_accuracy_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = train_toy(dir.path(), &[]);
    assert!(o.status.success());
    let data = dir.path().join("TOY");
    let csv = dir.path().join("metrics.csv");
    let ckpt = out.join("fold0.ckpt");
    let o = run(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--split", "train", "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let value = |prefix: &str| -> String {
        let line = text.lines().find(|l| l.starts_with(prefix)).unwrap();
        line[prefix.len()..].split_whitespace().next().unwrap().to_string()
    };
    assert_eq!(value("train accuracy: "), value("accuracy recorded at save time: "));
    let metrics = fs::read_to_string(&csv).unwrap();
    assert!(metrics.starts_with("metric,value\nsplit,train\ngraphs,6\n"), "{metrics}");
    assert!(metrics.contains("confusion_1_1,"));
}

#[test]
fn eval_rejects_a_feature_width_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = train_toy(dir.path(), &[]);
    assert!(o.status.success());
    let mut labelled = path(5, 0).unwrap();
    labelled.node_labels = Some(vec![0, 1, 2, 1, 0]);
    let mut other = path(4, 1).unwrap();
    other.node_labels = Some(vec![2, 2, 1, 0]);
    let data = dir.path().join("LAB");
    write_tu_dataset(&GraphCollection::new("LAB", vec![labelled, other]).unwrap(), &data, "LAB").unwrap();
    let o = run(&["eval", "--data", s(&data), "--checkpoint", s(&out.join("fold0.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("configuration error"), "{}", stderr(&o));
}
