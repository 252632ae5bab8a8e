use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn im2flow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_im2flow")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

const SMALL: [&str; 8] = [
    "--set",
    "dataset.n_train=16",
    "--set",
    "dataset.n_val=8",
    "--set",
    "dataset.n_test=8",
    "--set",
    "dataset.image_size=48",
];

fn synth(out: &Path, seed: &str) -> Output {
    let mut args = vec!["synth", "--seed", seed, "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    im2flow(&args)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_twice_gives_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = synth(&a, "7");
    let ob = synth(&b, "7");
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(oa.stdout, ob.stdout, "summaries (with checksums) differ");
    assert_eq!(tree(&a), tree(&b));
    let resolved = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(resolved.contains("seed = 7") && resolved.contains("n_train = 16"), "{resolved}");
}

#[test]
fn identity_evaluation_reports_zero_epe() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(synth(&data, "1").status.success());
    let out = dir.path().join("eval");
    let o = im2flow(&[
        "evaluate",
        "--dataset",
        data.to_str().unwrap(),
        "--predictors",
        "identity,zero",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let identity = &report[0];
    assert_eq!(identity["predictor"], "identity");
    for m in identity["masks"].as_array().unwrap() {
        assert_eq!(m["epe"], 0.0);
        assert_eq!(m["ds"], 1.0);
        assert_eq!(m["os"], 1.0);
    }
    let table = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(table.contains("identity") && table.contains("zero"));
    assert!(out.join("config.toml").exists());
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();

    // usage and config errors
    assert_eq!(im2flow(&["synth", "--bogus", "--out", o]).status.code(), Some(2));
    assert_eq!(im2flow(&["synth", "--set", "nope=1", "--out", o]).status.code(), Some(2));
    assert_eq!(im2flow(&["synth", "--set", "dataset.image_size=30", "--out", o]).status.code(), Some(2));

    // missing inputs
    let missing = dir.path().join("missing");
    let m = missing.to_str().unwrap();
    assert_eq!(im2flow(&["train-content", "--dataset", m, "--out", o]).status.code(), Some(3));
    assert_eq!(im2flow(&["synth", "--config", m, "--out", o]).status.code(), Some(3));

    // unreadable checkpoint
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"garbage").unwrap();
    let code = im2flow(&["predict", "--model", bad.to_str().unwrap(), "--input", m, "--out", o]).status.code();
    assert_eq!(code, Some(5));
    let err = String::from_utf8_lossy(&im2flow(&["predict", "--model", bad.to_str().unwrap(), "--input", m, "--out", o]).stderr)
        .to_string();
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["synth", "train-content", "train-im2flow", "predict", "evaluate", "train-streams", "recognize", "rank-motion"] {
        let o = im2flow(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("--out"), "{sub}");
    }
}
