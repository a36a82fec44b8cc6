//! End-to-end runs of the `glpnet` binary on tiny configurations.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "backbone.channels=4,4,8,8",
    "--set",
    "decoder.channels=8",
    "--set",
    "data.train_samples=4",
    "--set",
    "data.test_samples=2",
    "--set",
    "synth.size=32,32",
    "--set",
    "train.crop=32,32",
    "--epochs",
    "1",
    "--k",
    "2",
];

fn glpnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glpnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    glpnet(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(glpnet(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(glpnet(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = run("train", dir.path(), &["--set", "no.such.key=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no.such.key"));
    assert_eq!(glpnet(&["--help"]).status.code(), Some(0));
}

#[test]
fn unreadable_or_malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.cfg");
    let o = run(
        "train",
        dir.path(),
        &["--config", missing.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "seed = 1\nthis line has no equals sign\n").unwrap();
    let o = run("train", dir.path(), &["--config", bad.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("bad.cfg"), "{}", stderr(&o));
}

#[test]
fn synth_train_eval_vismasks_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run("synth", &data, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("train/manifest.txt").is_file() && data.join("test/manifest.txt").is_file());

    let run_dir = dir.path().join("run");
    let o = run("train", &run_dir, &["--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "checkpoint.glt",
        "checkpoint.cfg",
        "config.resolved",
        "train_log.csv",
        "metrics.json",
    ] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let resolved = std::fs::read_to_string(run_dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("gcfm.k=2"), "{resolved}");
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = run_dir.join("checkpoint.glt");
    let eval_dir = dir.path().join("eval");
    let o = glpnet(&[
        "eval",
        "--out",
        eval_dir.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(run_dir.join("metrics.json")).unwrap(),
        std::fs::read(eval_dir.join("metrics.json")).unwrap()
    );

    // Changing the architecture no longer matches the stored tensors.
    let o = glpnet(&[
        "eval",
        "--out",
        eval_dir.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--k",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("shape"), "{}", stderr(&o));

    let vis = dir.path().join("vis");
    let o = glpnet(&[
        "vismasks",
        "--out",
        vis.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--sample",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgms = std::fs::read_dir(&vis)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "pgm")
        })
        .count();
    assert_eq!(pgms, 4);
    let sums = std::fs::read_to_string(vis.join("mask_s001_sums.txt")).unwrap();
    assert_eq!(sums.lines().count(), 4);

    let o = glpnet(&[
        "vismasks",
        "--out",
        vis.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--sample",
        "99",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_sidecar_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("nothing.glt");
    let o = glpnet(&[
        "eval",
        "--out",
        dir.path().to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_requires_f64_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        glpnet(&["gradcheck", "--out", out, "--precision", "f32"])
            .status
            .code(),
        Some(1)
    );
    let o = glpnet(&["gradcheck", "--out", out, "--precision", "f64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(
        report.contains("G-CFM") || report.contains("gcfm"),
        "{report}"
    );
    assert!(!report.contains("FAIL"));
}

#[test]
fn ablate_rejects_unknown_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("ablate", dir.path(), &["--suite", "table9"]);
    assert_eq!(o.status.code(), Some(1));
}
