use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use obs_diff::{CalibrationSet, Container, ToyModel};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_obsdiff"));
    c.env_remove("OBSD_SEED");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json_file(p: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

/// Small model and calibration set in a fresh directory.
fn workspace(extra_model_flags: &[&str]) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-model", "--out", "m.obsd", "--seed", "4"];
    args.extend_from_slice(extra_model_flags);
    ok(dir.path(), &args);
    ok(dir.path(), &["gen-calib", "--model", "m.obsd", "--out", "c.obsd", "--samples", "6", "--seed", "5"]);
    dir
}

const PRUNE: &[&str] = &[
    "prune", "--model", "m.obsd", "--calib", "c.obsd", "--sparsity", "0.5", "--pattern", "unstructured",
    "--packages", "4", "--weighting", "log-decrease",
];

fn prune_to(dir: &Path, out: &str, report: &str, extra: &[&str]) -> Output {
    let mut args = PRUNE.to_vec();
    args.extend_from_slice(&["--out", out, "--report", report]);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

#[test]
fn prune_writes_model_and_report() {
    let dir = workspace(&[]);
    prune_to(dir.path(), "p.obsd", "r.json", &[]);
    let pruned = ToyModel::from_container(&Container::load(dir.path().join("p.obsd")).unwrap()).unwrap();
    let zeros: usize = pruned
        .layer_ids()
        .iter()
        .map(|&id| pruned.weight(id).unwrap().as_slice().iter().filter(|&&v| v == 0.0).count())
        .sum();
    let report = json_file(dir.path().join("r.json"));
    assert_eq!(report["target_zeros"], zeros);
    assert_eq!(report["config"]["spec"]["kind"], "unstructured");
    assert_eq!(report["config"]["num_packages"], 4);
    assert_eq!(report["config"]["weighting"], "log-decrease");
    assert_eq!(report["calibration_passes"], 24);
    assert_eq!(report["inputs"]["calibration_samples"], 6);
    assert!(report.get("total_seconds").is_none());
    let meta = Container::load(dir.path().join("p.obsd")).unwrap().metadata_json().unwrap();
    assert_eq!(meta["pipeline"], report["config"]);
}

#[test]
fn same_flags_same_bytes() {
    let dir = workspace(&[]);
    prune_to(dir.path(), "a.obsd", "a.json", &["--export-hessians", "ha.obsd"]);
    prune_to(dir.path(), "b.obsd", "b.json", &["--export-hessians", "hb.obsd", "--threads", "1"]);
    for (x, y) in [("a.obsd", "b.obsd"), ("a.json", "b.json"), ("ha.obsd", "hb.obsd")] {
        let a = std::fs::read(dir.path().join(x)).unwrap();
        let b = std::fs::read(dir.path().join(y)).unwrap();
        assert!(a == b, "{x} vs {y}");
    }
    let h = Container::load(dir.path().join("ha.obsd")).unwrap();
    assert_eq!(h.records.len(), 2 * 18);
    assert!(h.get("b1.ffn_b.down.Hinv").is_some());
}

#[test]
fn nm_on_indivisible_width_names_the_layer() {
    let dir = workspace(&["--hidden-dim", "30", "--heads", "5"]);
    let out = run(dir.path(), &["prune", "--model", "m.obsd", "--calib", "c.obsd", "--out", "x.obsd", "--pattern", "2:4"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert_eq!(e["error"], "BadSpec");
    assert_eq!(e["layer"], "b0.attn.q");
    assert!(!dir.path().join("x.obsd").exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["prune", "--bogus"][..],
        &["frobnicate"],
        &["gen-model"],
        &["prune", "--model", "m", "--calib", "c", "--out", "o", "--weighting", "cubic"],
        &["prune", "--model", "m", "--calib", "c", "--out", "o", "--method", "random"],
    ] {
        assert_eq!(run(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn io_and_format_failures_exit_one() {
    let dir = workspace(&[]);
    let out = run(dir.path(), &["inspect", "missing.obsd"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "Io");
    std::fs::write(dir.path().join("junk.obsd"), b"not a container").unwrap();
    let out = run(dir.path(), &["inspect", "junk.obsd"]);
    assert_eq!(error_json(&out)["error"], "NotAContainer");
    let out = run(dir.path(), &["prune", "--model", "c.obsd", "--calib", "c.obsd", "--out", "x.obsd"]);
    assert_eq!(error_json(&out)["error"], "BadMetadata");
}

#[test]
fn config_file_then_flags() {
    let dir = workspace(&[]);
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"num_packages": 2, "weighting": "uniform", "spec": {"kind": "semi-structured", "n": 2, "m": 4}}"#,
    )
    .unwrap();
    let args = [
        "prune", "--model", "m.obsd", "--calib", "c.obsd", "--out", "p.obsd", "--report", "r.json",
        "--config", "cfg.json", "--weighting", "linear-decrease",
    ];
    ok(dir.path(), &args);
    let r = json_file(dir.path().join("r.json"));
    assert_eq!(r["config"]["num_packages"], 2);
    assert_eq!(r["config"]["weighting"], "linear-decrease");
    assert_eq!(r["config"]["spec"]["m"], 4);

    std::fs::write(dir.path().join("bad.json"), r#"{"num_pakcages": 2}"#).unwrap();
    let out = run(dir.path(), &["prune", "--model", "m.obsd", "--calib", "c.obsd", "--out", "p.obsd", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "BadConfig");
}

#[test]
fn every_weighting_scheme_is_accepted() {
    let dir = workspace(&[]);
    for (i, w) in ["uniform", "linear-increase", "linear-decrease", "log-increase", "log-decrease"].iter().enumerate() {
        let (out, rep) = (format!("p{i}.obsd"), format!("r{i}.json"));
        ok(dir.path(), &["prune", "--model", "m.obsd", "--calib", "c.obsd", "--out", &out, "--report", &rep, "--weighting", w]);
        let r = json_file(dir.path().join(&rep));
        let alphas: Vec<f64> = serde_json::from_value(r["weights"].clone()).unwrap();
        assert_eq!(alphas.len(), 8);
        assert_eq!(r["config"]["weighting"], *w);
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-model", "--out", "flag.obsd", "--seed", "7"]);
    let out = bin().current_dir(dir.path()).env("OBSD_SEED", "7").args(["gen-model", "--out", "env.obsd"]).output().unwrap();
    assert!(out.status.success());
    ok(dir.path(), &["gen-model", "--out", "zero.obsd"]);
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("flag.obsd"), read("env.obsd"));
    assert_ne!(read("flag.obsd"), read("zero.obsd"));
}

#[test]
fn structured_export_and_excluded_blocks() {
    let dir = workspace(&["--blocks", "3"]);
    let args = [
        "prune", "--model", "m.obsd", "--calib", "c.obsd", "--out", "s.obsd", "--report", "r.json", "--pattern",
        "heads", "--sparsity", "0.5", "--exclude-blocks", "first,last", "--packages", "2", "--export", "shrunk",
    ];
    ok(dir.path(), &args);
    let r = json_file(dir.path().join("r.json"));
    assert_eq!(r["config"]["exclude_blocks"], serde_json::json!([0, 2]));
    let removed = r["removed_heads"].as_object().unwrap();
    assert_eq!(removed.keys().collect::<Vec<_>>(), ["1"]);
    assert_eq!(removed["1"].as_array().unwrap().len(), 2);
    let heads = r["shrink"]["kept_heads"].as_object().unwrap();
    assert_eq!(heads["0"].as_array().unwrap().len(), 4);
    assert_eq!(heads["1"].as_array().unwrap().len(), 2);
    let m = ToyModel::from_container(&Container::load(dir.path().join("s.obsd")).unwrap()).unwrap();
    assert_eq!(m.blocks[1].q.rows(), 16);
    assert_eq!(m.blocks[0].q.rows(), 32);
}

#[test]
fn eval_and_inspect() {
    let dir = workspace(&[]);
    prune_to(dir.path(), "p.obsd", "r.json", &[]);
    ok(dir.path(), &["eval", "--dense", "m.obsd", "--pruned", "p.obsd", "--samples", "5", "--report", "e.json", "--csv", "d.csv"]);
    let e = json_file(dir.path().join("e.json"));
    assert_eq!(e["eval_samples"], 5);
    assert!(e["divergence"]["mean"].as_f64().unwrap() > 0.0);
    assert_eq!(e["sparsity"]["passed"], true);
    assert_eq!(e["config"]["spec"]["kind"], "unstructured");
    let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let out = ok(dir.path(), &["inspect", "p.obsd", "--spec", "2:4"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["metadata"]["kind"], "model");
    assert_eq!(v["audit"]["passed"], false);
    let out = ok(dir.path(), &["inspect", "c.obsd"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["records"].as_array().unwrap().len(), 12);
    assert!(v.get("audit").is_none());
    let calib = CalibrationSet::from_container(&Container::load(dir.path().join("c.obsd")).unwrap()).unwrap();
    assert_eq!(calib.len(), 6);
}

#[test]
fn in_process_entry_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.obsd");
    let code = obs_diff_cli::run_cli(["obsdiff", "gen-model", "--out", out.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(code, 0);
    assert!(out.exists());
    assert_eq!(obs_diff_cli::run_cli(["obsdiff", "--help"]), 0);
    assert_eq!(obs_diff_cli::run_cli(["obsdiff", "eval"]), 2);
}
