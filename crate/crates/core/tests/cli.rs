//! End-to-end checks of the command-line surface, driving the real binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bridge-ddim"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Byte-compare every file of two directories.
fn assert_dirs_identical(a: &Path, b: &Path) {
    let mut names: Vec<String> = fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut names_b: Vec<String> = fs::read_dir(b)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names_b.sort();
    assert_eq!(names, names_b, "directory listings differ");
    for name in names {
        let fa = fs::read(a.join(&name)).unwrap();
        let fb = fs::read(b.join(&name)).unwrap();
        assert_eq!(fa, fb, "{name} differs");
    }
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["gen-dataset", "--out", "/tmp/x", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let usage = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(usage.to_lowercase().contains("usage") || usage.contains("unexpected"), "{usage}");
}

#[test]
fn gen_dataset_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = run(&[
            "gen-dataset",
            "--out",
            out.to_str().unwrap(),
            "--per-class",
            "2",
            "--seed",
            "1",
            "--width",
            "96",
            "--height",
            "24",
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(fs::read_dir(&a).unwrap().count(), 17, "16 images + manifest");
    assert_dirs_identical(&a, &b);
}

#[test]
fn reconstruct_oracle_reports_tiny_error_and_succeeds() {
    let out = run(&["reconstruct-oracle", "--trials", "10", "--steps", "20", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let err: f64 = text
        .split("max error")
        .nth(1)
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| panic!("no max error in {text:?}"));
    assert!(err <= 1e-4, "reported error {err}");
}

#[test]
fn train_sample_info_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("loss.log");

    let res = run(&[
        "gen-dataset",
        "--out",
        data.to_str().unwrap(),
        "--per-class",
        "2",
        "--seed",
        "3",
        "--width",
        "96",
        "--height",
        "24",
    ]);
    assert!(res.status.success());

    let res = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch",
        "4",
        "--lr",
        "1e-3",
        "--widths",
        "4,6",
        "--bottleneck",
        "8",
        "--block-depth",
        "1",
        "--seed",
        "5",
        "--loss-log",
        log.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let log_text = fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 1);
    assert!(log_text.starts_with("epoch 1 loss "), "{log_text:?}");

    let res = run(&["info", "--ckpt", ckpt.to_str().unwrap()]);
    assert!(res.status.success());
    let info = stdout(&res);
    assert!(info.contains("image: 24x96"), "{info}");
    assert!(info.contains("widths: [4, 6] + bottleneck 8"), "{info}");
    assert!(info.contains("parameters: "), "{info}");

    // Same seed and checkpoint twice: identical sample files.
    let (s1, s2) = (dir.path().join("s1"), dir.path().join("s2"));
    for out in [&s1, &s2] {
        let res = run(&[
            "sample",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--count",
            "2",
            "--steps",
            "3",
            "--seed",
            "42",
            "--out",
            out.to_str().unwrap(),
            "--grid",
            out.join("grid.pgm").to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_dirs_identical(&s1, &s2);
    assert!(s1.join("sample_000.pgm").exists());
    assert!(s1.join("grid.pgm").exists());

    let demo = dir.path().join("demo");
    let res = run(&[
        "noisify-demo",
        "--data",
        data.to_str().unwrap(),
        "--index",
        "1",
        "--levels",
        "3",
        "--out",
        demo.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(fs::read_dir(&demo).unwrap().count(), 3);
}

#[test]
fn sample_bytes_survive_checkpoint_reload() {
    // Loading a checkpoint and saving it again must not change sampling.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ckpt");
    assert!(run(&[
        "gen-dataset",
        "--out",
        data.to_str().unwrap(),
        "--per-class",
        "1",
        "--seed",
        "9",
        "--width",
        "96",
        "--height",
        "24",
    ])
    .status
    .success());
    assert!(run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch",
        "8",
        "--widths",
        "4,6",
        "--bottleneck",
        "8",
        "--block-depth",
        "1",
        "--seed",
        "11",
    ])
    .status
    .success());

    let (model, norm, schedule) = bridge_ddim::checkpoint::load_checkpoint(&ckpt).unwrap();
    let copy = dir.path().join("copy.ckpt");
    bridge_ddim::checkpoint::save_checkpoint(&model, &norm, &schedule, &copy).unwrap();

    let (s1, s2) = (dir.path().join("s1"), dir.path().join("s2"));
    for (ck, out) in [(&ckpt, &s1), (&copy, &s2)] {
        assert!(run(&[
            "sample",
            "--ckpt",
            ck.to_str().unwrap(),
            "--count",
            "2",
            "--steps",
            "4",
            "--seed",
            "13",
            "--out",
            out.to_str().unwrap(),
        ])
        .status
        .success());
    }
    assert_dirs_identical(&s1, &s2);
}
