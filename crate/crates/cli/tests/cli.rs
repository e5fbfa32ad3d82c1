use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rstab_core::data::io::{load_dataset, Manifest};
use rstab_core::density::{DensityHead, HIDDEN};
use rstab_core::features::FEATURE_CHANNELS;

fn rstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rstab"))
        .args(args)
        .env_remove("RSTAB_THREADS")
        .output()
        .expect("run rstab")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if path.is_dir() {
            out.extend(tree(&path).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            out.push((name, fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_reports_moving_objects() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = rstab(&["synth", "--preset", "dynamic", "--seed", "7", "--out", p(dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("1 moving object"), "{text}");
    }
    assert_eq!(tree(&a), tree(&b));
    let m = Manifest::read(&a).unwrap();
    assert_eq!((m.frames, m.width, m.height, m.moving_objects), (30, 64, 64, 1));
}

#[test]
fn unwritable_output_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    let out = rstab(&["synth", "--out", p(&file.join("inside"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn invalid_inputs_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, "seed = 1\nframes = 0\n").unwrap();
    let out = rstab(&["synth", "--spec", p(&spec), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = rstab(&["stabilize", p(&tmp.path().join("missing")), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = rstab(&["--threads", "0", "gradcheck", "--trials", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_head_file_falls_back_to_the_analytic_head() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = rstab(&[
        "stabilize",
        "--preset",
        "static",
        "--window",
        "1",
        "--head",
        p(&tmp.path().join("nope.bin")),
        "--out",
        p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let report = fs::read_to_string(out_dir.join("report.toml")).unwrap();
    assert!(report.contains("head = \"analytic\""));
    assert!(report.contains("window = 1"));
    assert!(report.contains("seed = 7"));
    assert_eq!(fs::read_dir(out_dir.join("frames")).unwrap().count(), 30);
    assert_eq!(fs::read_dir(out_dir.join("masks")).unwrap().count(), 30);
}

#[test]
fn stabilize_output_does_not_depend_on_threads_or_location() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("deeper/b"));
    let run = |dir: &Path, threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_rstab"))
            .args(["stabilize", "--preset", "dynamic", "--out", p(dir)])
            .env("RSTAB_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&a, "1");
    run(&b, "3");
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn zero_iterations_writes_the_initial_head() {
    let tmp = tempfile::tempdir().unwrap();
    let head = tmp.path().join("head.bin");
    let out = rstab(&[
        "train",
        "--preset",
        "static",
        "--iterations",
        "0",
        "--train-seed",
        "5",
        "--out",
        p(&head),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let loaded = DensityHead::load(&head).unwrap();
    assert_eq!(loaded, DensityHead::init(FEATURE_CHANNELS, HIDDEN, 5));
}

#[test]
fn eval_of_an_input_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(rstab(&["synth", "--preset", "static", "--out", p(&data)]).status.success());
    let report = tmp.path().join("eval.toml");
    let out = rstab(&["eval", p(&data), p(&data), "--report", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let v: toml::Table = toml::from_str(&text).unwrap();
    assert_eq!(v["cropping_ratio"].as_float(), Some(1.0));
    assert!((v["distortion"].as_float().unwrap() - 1.0).abs() < 1e-9);
    // 30 frames are too few for the stability score.
    assert!(!v.contains_key("stability_input"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("n/a"));
}

#[test]
fn eval_reports_stability_gain_of_a_stabilized_clip() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out_dir) = (tmp.path().join("data"), tmp.path().join("out"));
    assert!(rstab(&["synth", "--preset", "parallax", "--frames", "40", "--out", p(&data)]).status.success());
    assert!(rstab(&["stabilize", p(&data), "--out", p(&out_dir)]).status.success());
    let report = tmp.path().join("eval.toml");
    assert!(rstab(&["eval", p(&data), p(&out_dir), "--report", p(&report)]).status.success());
    let v: toml::Table = toml::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let (si, so) = (
        v["stability_input"].as_float().unwrap(),
        v["stability_output"].as_float().unwrap(),
    );
    assert!(so >= si, "{si} -> {so}");
    assert_eq!(v["cropping_ratio"].as_float(), Some(1.0));
    assert!(v["mean_psnr"].as_float().unwrap() > 30.0);
    // The loaded clip matches what was written.
    assert_eq!(load_dataset(&data).unwrap().len(), 40);
}

#[test]
fn gradcheck_exit_status_follows_the_tolerance() {
    let out = rstab(&["gradcheck", "--trials", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));

    // A huge step turns finite differences into a poor oracle.
    let out = rstab(&["gradcheck", "--trials", "10", "--step", "0.5"]);
    assert_eq!(out.status.code(), Some(1));
}
