use std::path::Path;
use std::process::Command;

use serde_json::Value;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn bin(args: &[&str]) -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_tsegcn"))
        .args(args)
        .env_remove("TSEGCN_THREADS")
        .output()
        .unwrap();
    Outcome {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn in_process(args: &[&str]) -> (u8, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("tsegcn").chain(args.iter().copied());
    let code = tsegcn::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json_ok(args: &[&str]) -> Value {
    let (code, out, err) = in_process(args);
    assert_eq!(code, 0, "{args:?}: {err}");
    serde_json::from_str(&out).unwrap_or_else(|e| panic!("{args:?}: {e}\n{out}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn audit_default_reports_sizes() {
    let r = bin(&["audit", "--config", "default", "--json"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["params"], 1_115_480);
    assert_eq!(v["flops"], 1_350_800_160u64);
    assert!(v["params_deviation"].as_f64().unwrap().abs() < 0.1);
    let text = bin(&["audit", "--config", "default"]);
    assert!(text.stdout.starts_with("params 1115480"), "{}", text.stdout);
}

#[test]
fn gradcheck_seed_seven_passes() {
    let r = bin(&["gradcheck", "--seed", "7", "--json"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["passed"], true);
    let layers = v["layers"].as_array().unwrap();
    assert!(layers.len() >= 9);
    assert!(layers.iter().any(|l| l["masked_zero"] == true));
}

#[test]
fn gradcheck_with_impossible_tolerance_fails() {
    let (code, _, err) = in_process(&["gradcheck", "--seed", "1", "--tol", "1e-15"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error: gradient check failed"), "{err}");
}

#[test]
fn missing_graph_file_is_named() {
    let r = bin(&["graph", "inspect", "missing.txt"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("missing.txt"), "{}", r.stderr);
    assert!(r.stdout.is_empty());
}

#[test]
fn invocation_errors_exit_two() {
    assert_eq!(bin(&["audit", "--bogus"]).code, 2);
    assert_eq!(bin(&["frobnicate"]).code, 2);
    assert_eq!(bin(&[]).code, 2);
    assert_eq!(bin(&["train"]).code, 2);
    let help = bin(&["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("gradcheck"));
}

#[test]
fn graph_inspect_bundled() {
    let v = json_ok(&["--json", "graph", "inspect", "kinect_v2"]);
    assert_eq!(v["n"], 25);
    assert_eq!(v["edges"], 24);
    let hist: u64 = v["hop_histogram"].as_array().unwrap().iter().map(|h| h.as_u64().unwrap()).sum();
    assert_eq!(hist, 25 * 25);
    let (code, out, _) = in_process(&["graph", "inspect", "toy9"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("joints 9\n"));
}

#[test]
fn graph_inspect_file_and_bad_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.txt");
    std::fs::write(&path, "n=3\n0 1\n1 2\n").unwrap();
    let (code, out, err) = in_process(&["--json", "graph", "inspect", p(&path)]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["diameter"], 2);
    std::fs::write(&path, "n=3\n0 1\n").unwrap();
    let (code, _, err) = in_process(&["graph", "inspect", p(&path)]);
    assert_eq!(code, 1);
    assert!(err.contains("g.txt"), "{err}");
}

#[test]
fn model_summary_totals_match_audit() {
    let v = json_ok(&["--json", "model", "summary", "--config", "default", "--batch", "2"]);
    let layers = v["layers"].as_array().unwrap();
    let params: u64 = layers.iter().map(|l| l["params"].as_u64().unwrap()).sum();
    let flops: u64 = layers.iter().map(|l| l["flops"].as_u64().unwrap()).sum();
    assert_eq!(params, v["params"].as_u64().unwrap());
    assert_eq!(flops, v["flops"].as_u64().unwrap());
    assert_eq!(v["params"], 1_115_480);
    let no_norm = json_ok(&["--json", "model", "summary", "--config", "default", "--no-norm"]);
    assert!(no_norm["params"].as_u64().unwrap() < 1_115_480);
}

#[test]
fn end_to_end_gen_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let g = json_ok(&[
        "--json",
        "gen",
        "--out",
        p(&data),
        "--seed",
        "3",
        "--samples-per-class",
        "2",
        "--test-per-class",
        "1",
    ]);
    assert_eq!((g["train_samples"].as_u64(), g["test_samples"].as_u64()), (Some(8), Some(4)));
    let ckpt = dir.path().join("m.ckpt");
    let (train_m, test_m) = (data.join("train.jsonl"), data.join("test.jsonl"));
    let log = dir.path().join("log.jsonl");
    let train_args = [
        "--json",
        "train",
        "--train",
        p(&train_m),
        "--test",
        p(&test_m),
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--out",
        p(&ckpt),
        "--log",
        p(&log),
    ];
    let t = json_ok(&train_args);
    assert_eq!(t["epochs"], 2);
    assert_eq!(t["last"]["wall_time"], 0.0);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);
    // Training is reproducible from the command line.
    let ckpt_bytes = std::fs::read(&ckpt).unwrap();
    std::fs::remove_file(&ckpt).unwrap();
    assert_eq!(json_ok(&train_args), t);
    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_bytes);

    let e = json_ok(&["--json", "eval", "--checkpoint", p(&ckpt), "--data", p(&data.join("test.jsonl"))]);
    assert_eq!(e["samples"], 4);
    assert_eq!(e["accuracy"], t["best_eval"]["acc"]);
    let threaded = json_ok(&[
        "--json",
        "--threads",
        "2",
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data.join("test.jsonl")),
    ]);
    assert_eq!(threaded, e);

    let sample = data.join("test/00000.skel");
    let topo = json_ok(&["topology", "dump", "--layer", "2", "--checkpoint", p(&ckpt), "--input", p(&sample)]);
    let h = &topo["bodies"][0]["h"];
    assert_eq!(h.as_array().unwrap().len(), 2);
    for slice in h.as_array().unwrap() {
        assert_eq!(slice.as_array().unwrap().len(), 9);
    }
    let offsets = json_ok(&["--json", "offsets", "dump", "--checkpoint", p(&ckpt), "--input", p(&sample)]);
    let rows = offsets.as_array().unwrap();
    assert!(!rows.is_empty());
    for r in rows {
        let pos = r["mean_position"].as_f64().unwrap();
        let base = r["base"].as_f64().unwrap();
        let off = r["mean_offset"].as_f64().unwrap();
        assert!((pos - base - off).abs() < 1e-12);
    }
    let (code, csv, _) = in_process(&["offsets", "dump", "--checkpoint", p(&ckpt), "--input", p(&sample)]);
    assert_eq!(code, 0);
    assert_eq!(csv.lines().count(), rows.len() + 1);
    assert!(csv.starts_with("layer,branch,dilation,tap,"));

    let (code, _, err) = in_process(&["topology", "dump", "--layer", "99", "--checkpoint", p(&ckpt), "--input", p(&sample)]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn eval_rejects_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"TSEGCNCK\x01\x00").unwrap();
    let (code, _, err) = in_process(&["eval", "--checkpoint", p(&ckpt), "--data", "nowhere.jsonl"]);
    assert_eq!(code, 1);
    assert!(err.contains("bad.ckpt"), "{err}");
}

#[test]
fn convert_ntu_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("2\n");
    for f in 0..2 {
        text.push_str("1\n72057594037931101 0 1 1 1 1 0 0.1 0.2 2\n25\n");
        for j in 0..25 {
            text.push_str(&format!("{} {} 3.0 0 0 0 0 0 0 0 0 2\n", j as f64 * 0.01, f as f64 * 0.1));
        }
    }
    let input = dir.path().join("S001C001P001R001A007.skeleton");
    std::fs::write(&input, text).unwrap();
    let out = dir.path().join("out");
    let v = json_ok(&["--json", "convert", "ntu", p(&input), "--out", p(&out), "--persons", "2"]);
    assert_eq!(v["labelled"], 1);
    let seq = tsegcn::dataio::read_sequence(out.join("S001C001P001R001A007.skel")).unwrap();
    assert_eq!((seq.joints, seq.persons, seq.frames, seq.label), (25, 1, 2, Some(6)));
    let manifest = tsegcn::dataio::DatasetManifest::read(out.join("converted.jsonl")).unwrap();
    assert_eq!(manifest.entries.len(), 1);

    std::fs::write(&input, "2\n1\n").unwrap();
    let (code, _, err) = in_process(&["convert", "ntu", p(&input), "--out", p(&out)]);
    assert_eq!(code, 1);
    assert!(err.contains("A007.skeleton"), "{err}");
}

#[test]
fn outputs_are_deterministic() {
    for args in [
        &["--json", "audit", "--config", "toy"][..],
        &["--json", "model", "summary"][..],
        &["--json", "graph", "inspect", "toy9"][..],
    ] {
        assert_eq!(in_process(args), in_process(args));
    }
}
