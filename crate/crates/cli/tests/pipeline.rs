use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn resroute(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resroute"))
        .current_dir(dir)
        .args(["--log-level", "error"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = resroute(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Full offline pipeline with relative paths, so two runs can be compared byte for byte.
fn pipeline(dir: &Path) {
    std::fs::write(dir.join("config.toml"), "seed = 3\n[train]\nepochs = 40\nlearning_rate = 0.01\n").unwrap();
    let cfg = ["--config", "config.toml"];
    let with = |rest: &[&'static str]| -> Vec<&str> { cfg.iter().copied().chain(rest.iter().copied()).collect() };
    ok(dir, &with(&["simulate", "--n", "60", "--out", "data", "--native", "800x600", "--images", "2"]));
    ok(dir, &with(&["label", "--input", "data/samples.jsonl", "--output", "labeled.jsonl", "--spec", "data/spec.json"]));
    ok(dir, &with(&["train", "--data", "labeled.jsonl", "--out", "head.json"]));
    for (mode, out) in [("continuous", "eval-continuous.jsonl"), ("passthrough", "eval-passthrough.jsonl")] {
        let args = ["eval", "--data", "heldout.jsonl", "--head", "head.json", "--out", out, "--mode", mode, "--spec", "data/spec.json"];
        ok(dir, &with(&args));
    }
}

const OUTPUTS: [&str; 8] = [
    "data/samples.jsonl",
    "data/spec.json",
    "data/features.jsonl",
    "labeled.jsonl",
    "head.json",
    "heldout.jsonl",
    "eval-continuous.jsonl",
    "eval-passthrough.jsonl",
];

#[test]
fn pipeline_is_deterministic_and_leaves_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in OUTPUTS {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs between runs");
    }
    for m in [
        "data/manifest.json",
        "labeled.jsonl.manifest.json",
        "head.json.manifest.json",
        "eval-continuous.jsonl.manifest.json",
        "eval-passthrough.jsonl.manifest.json",
    ] {
        let v: Value = serde_json::from_slice(&std::fs::read(a.path().join(m)).unwrap()).unwrap();
        assert_eq!(v["seed"], 3, "{m}");
        assert_eq!(v["config_sha256"].as_str().map(str::len), Some(64), "{m}");
        assert!(v["outputs"].as_array().is_some_and(|o| !o.is_empty()), "{m}");
    }
    let summary: Value = serde_json::from_slice(&std::fs::read(a.path().join("eval-passthrough.jsonl.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["savings_pct"], 0.0);
}

#[test]
fn report_compares_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let out = resroute(
        d,
        &["report", "--run", "eval-passthrough.jsonl", "--run", "eval-continuous.jsonl", "--json", "report.json", "--svg", "plot.svg"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.starts_with("# profile patch-grid"), "{table}");
    assert!(table.contains("eval-continuous"));

    let report: Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["savings_pct"], 0.0);
    assert!(runs[1]["savings_pct"].as_f64().unwrap() < 0.0);
    assert!(std::fs::read_to_string(d.join("plot.svg")).unwrap().starts_with("<svg"));
    assert!(d.join("report.json.manifest.json").exists());
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&resroute(d, &["--help"])), 0);
    assert_eq!(code(&resroute(d, &["eval", "--mode", "turbo"])), 1);

    std::fs::write(d.join("bad.toml"), "colour = 1\n").unwrap();
    let out = resroute(d, &["--config", "bad.toml", "simulate", "--n", "5", "--out", "x"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    assert_eq!(code(&resroute(d, &["label", "--input", "missing.jsonl", "--output", "o.jsonl", "--spec", "s.json"])), 1);
    assert_eq!(code(&resroute(d, &["simulate", "--n", "5", "--out", "x", "--mix", "500:1"])), 1);

    // nothing listens on the discard port
    std::fs::write(
        d.join("remote.toml"),
        "[target_vlm]\nkind = \"http\"\nbase_url = \"http://127.0.0.1:9/v1\"\nmodel = \"m\"\ntimeout_s = 2.0\nmax_retries = 0\n",
    )
    .unwrap();
    ok(d, &["simulate", "--n", "4", "--out", "data", "--native", "64x48", "--images", "1"]);
    let out = resroute(d, &["--config", "remote.toml", "label", "--input", "data/samples.jsonl", "--output", "l.jsonl"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("l.jsonl.manifest.json").exists());
}

#[test]
fn closed_stdout_is_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_resroute"))
        .current_dir(dir.path())
        .args(["--log-level", "error", "simulate", "--n", "3", "--out", "d", "--native", "32x32", "--images", "1"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    drop(child.stdout.take());
    assert_eq!(child.wait().unwrap().code(), Some(0));
}
