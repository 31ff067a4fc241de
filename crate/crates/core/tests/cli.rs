use std::fs;
use std::path::Path;
use std::process::Command;

use adaptmatch::cli::{describe, run, Cli, ADAPTERS_FILE, BACKBONE_FILE, CONFIG_FILE, INVERTIBLE_FILE, REPORT_FILE, VOCAB_FILE};
use clap::Parser;
use serde_json::Value;

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("adaptmatch").chain(args.iter().copied())).unwrap()
}

fn run_ok(args: &[&str]) -> Vec<String> {
    run(&cli(args)).unwrap_or_else(|e| panic!("{args:?}: {}", describe(&e)))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const SHAPE: [&str; 10] = ["--hidden", "16", "--layers", "1", "--heads", "2", "--ff-dim", "32", "--bottleneck", "4"];

fn generate(dir: &Path, pairs: &str) -> String {
    let data = dir.join("data.jsonl");
    let d = data.to_str().unwrap().to_string();
    run_ok(&["generate-synthetic", "--out", &d, "--pairs", pairs]);
    d
}

fn finetune_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut v = vec!["finetune", "--data", data, "--out-dir", out, "--epochs", "2", "--lr", "3e-4,1e-4", "--max-len", "48"];
    v.extend(SHAPE);
    v
}

#[test]
fn finetune_is_deterministic_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "120");
    let (o1, o2) = (dir.path().join("r1"), dir.path().join("r2"));
    let (s1, s2) = (o1.to_str().unwrap(), o2.to_str().unwrap());
    run_ok(&finetune_args(&data, s1));
    run_ok(&finetune_args(&data, s2));
    for f in [ADAPTERS_FILE, BACKBONE_FILE, VOCAB_FILE] {
        assert_eq!(fs::read(o1.join(f)).unwrap(), fs::read(o2.join(f)).unwrap(), "{f}");
    }
    let mut r1 = read_json(&o1.join(REPORT_FILE));
    let mut r2 = read_json(&o2.join(REPORT_FILE));
    for r in [&mut r1, &mut r2] {
        let obj = r.as_object_mut().unwrap();
        obj.remove("wall_clock_seconds");
        obj.remove("config");
    }
    assert_eq!(r1, r2);
    let runs = r1["finetune"]["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(r1["dataset"]["pairs"], 120);
    assert!(r1["parameters"]["ratio"].as_f64().unwrap() > 0.0);

    let echo = read_json(&o1.join(CONFIG_FILE));
    assert_eq!(echo["command"]["subcommand"], "finetune");
    assert_eq!(read_json(&o1.join(REPORT_FILE))["config"], echo);
    let text = echo.to_string();
    assert!(text.contains("0.0003") && text.contains("\"epochs\":2"), "{text}");
}

#[test]
fn evaluate_reproduces_test_metrics_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "90");
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    run_ok(&finetune_args(&data, o));
    let ckpt = out.join(ADAPTERS_FILE);
    let eval_out = dir.path().join("eval");
    let lines = run_ok(&[
        "evaluate",
        "--data",
        &data,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out-dir",
        eval_out.to_str().unwrap(),
    ]);
    assert!(lines[0].contains("f1"), "{lines:?}");
    let m = read_json(&eval_out.join("metrics.json"));
    assert_eq!(m["pairs"], 90);
    let tp = m["metrics"]["tp"].as_u64().unwrap();
    let sum: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| m["metrics"][k].as_u64().unwrap()).sum();
    assert_eq!(sum, 90);
    assert!(tp <= 90);

    let report = dir.path().join("storage");
    run_ok(&[
        "report-storage",
        "--backbone",
        out.join(BACKBONE_FILE).to_str().unwrap(),
        "--adapter",
        ckpt.to_str().unwrap(),
        "--out-dir",
        report.to_str().unwrap(),
    ]);
    let s = read_json(&report.join("storage.json"));
    assert!(s["ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn mlm_then_invertible_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "60");
    let mlm = dir.path().join("mlm");
    let mut args = vec!["train-mlm", "--data", &data, "--out-dir", mlm.to_str().unwrap(), "--epochs", "1", "--max-len", "32"];
    args.extend(SHAPE);
    run_ok(&args);
    let rep = read_json(&mlm.join(REPORT_FILE));
    assert_eq!(rep["epochs"].as_array().unwrap().len(), 1);
    assert_eq!(rep["mask_prob"], 0.25);

    let out = dir.path().join("ft");
    let inv = mlm.join(INVERTIBLE_FILE);
    let vocab = mlm.join(VOCAB_FILE);
    let mut args = vec![
        "finetune",
        "--data",
        &data,
        "--out-dir",
        out.to_str().unwrap(),
        "--epochs",
        "1",
        "--max-len",
        "32",
        "--config",
        "invertible-plus-task",
        "--invertible",
        inv.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
    ];
    args.extend(SHAPE);
    run_ok(&args);
    assert!(out.join(ADAPTERS_FILE).is_file());
}

#[test]
fn invalid_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("o");
    let err = run(&cli(&["finetune", "--data", empty.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])).unwrap_err();
    assert!(describe(&err).contains("empty dataset"), "{}", describe(&err));

    let missing = dir.path().join("nope.jsonl");
    let err = run(&cli(&["finetune", "--data", missing.to_str().unwrap()])).unwrap_err();
    assert!(describe(&err).contains("no such file"));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"left\": \"a\", \"label\": 1}\n").unwrap();
    let err = run(&cli(&["finetune", "--data", bad.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])).unwrap_err();
    assert!(describe(&err).contains("missing key \"right\""), "{}", describe(&err));

    assert!(Cli::try_parse_from(["adaptmatch", "finetune"]).is_err());
    assert!(Cli::try_parse_from(["adaptmatch", "finetune", "--data", "x", "--config", "bogus"]).is_err());
}

#[test]
fn binary_reports_errors_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let exe = env!("CARGO_BIN_EXE_adaptmatch");
    let out = Command::new(exe)
        .args(["finetune", "--data", empty.to_str().unwrap()])
        .env("ADAPTMATCH_OUT", dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:") && stderr.contains("empty dataset"), "{stderr}");

    let help = Command::new(exe).arg("--help").output().unwrap();
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("finetune"));
}
