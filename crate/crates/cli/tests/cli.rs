use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mshnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mshnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mshnet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_data(dir: &Path) {
    ok(&["gen-data", "--out", s(dir), "--train", "8", "--test", "4", "--size", "32", "--seed", "2"]);
}

const SMALL: [&str; 2] = ["--base-channels", "2"];

#[test]
fn train_writes_a_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    toy_data(&data);
    let out = dir.path().join("runs");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out), "--loss", "sls", "--epochs", "30", "--seed", "7"];
    args.extend(SMALL);
    ok(&args);
    let record: serde_json::Value = serde_json::from_slice(&fs::read(out.join("sls-seed7.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 7);
    assert_eq!(record["history"].as_array().unwrap().len(), 30);
    assert!(out.join("sls-seed7.ckpt").exists());
    assert!(out.join("sls-seed7.timing.json").exists());

    let report = ok(&["eval", "--checkpoint", s(&out.join("sls-seed7.ckpt")), "--data", s(&data)]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["iou"], record["eval"]["iou"]);

    let csv = dir.path().join("buckets.csv");
    ok(&["eval", "--checkpoint", s(&out.join("sls-seed7.ckpt")), "--data", s(&data), "--out", s(&dir.path().join("e.json")), "--csv", s(&csv)]);
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 4);
}

#[test]
fn missing_dataset_fails_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let o = mshnet(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    let o = mshnet(&["ablate", "--preset", "losses", "--data", s(&dir.path().join("nope")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    let o = mshnet(&["eval", "--checkpoint", s(&dir.path().join("x.ckpt")), "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("e.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(mshnet(&["train"]).status.code(), Some(2));
    assert_eq!(mshnet(&["ablate", "--preset", "everything", "--data", "d", "--out", "o"]).status.code(), Some(2));
    assert_eq!(mshnet(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    toy_data(&data);
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, "epochs = 1\nloss = \"iou\"\nscales = 0\n[model]\nbase_channels = 2\ninput_size = [32, 32]\n").unwrap();
    let out = dir.path().join("r");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--epochs", "2", "--label", "cfg"]);
    let record: serde_json::Value = serde_json::from_slice(&fs::read(out.join("cfg.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["loss"], "iou");
    assert_eq!(record["config"]["epochs"], 2);
    assert_eq!(record["config"]["scales"], 0);

    fs::write(&cfg, "epochs = 1\nlearning_rate = 3\n").unwrap();
    let o = mshnet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn ablate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    toy_data(&data);
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--preset", "location", "--data", s(&data), "--out", s(&out), "--seeds", "0,1", "--epochs", "1"];
    args.extend(SMALL);
    let table = ok(&args);
    assert_eq!(table.lines().count(), 4);
    assert!(out.join("table.json").exists());
    assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), 3 * 2 * 3);

    let rep = dir.path().join("report");
    ok(&["report", "--runs", s(&out), "--out", s(&rep)]);
    for f in ["records.json", "loss_curves.tsv", "weight_grid.tsv", "location_grid.tsv", "comparison.csv", "comparison.json"] {
        assert!(rep.join(f).exists(), "{f}");
    }
    let curves = fs::read_to_string(rep.join("loss_curves.tsv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 6 * 2);
}

#[test]
fn grad_check_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc.json");
    let text = ok(&["grad-check", "--trials", "2", "--seed", "1", "--out", s(&out)]);
    assert_eq!(text.lines().count(), 10);
    let r: serde_json::Value = serde_json::from_slice(&fs::read(out).unwrap()).unwrap();
    assert_eq!(r["entries"].as_array().unwrap().len(), 9);
}

#[test]
fn external_data_is_indexed() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("synthetic");
    toy_data(&src);
    let out = dir.path().join("ext");
    let stdout = ok(&["gen-data", "--out", s(&out), "--external", s(&src.join("images")), s(&src.join("masks")), "--split", "equal"]);
    assert!(stdout.contains("12 pairs"), "{stdout}");
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["samples"].as_array().unwrap().len(), 12);
}
