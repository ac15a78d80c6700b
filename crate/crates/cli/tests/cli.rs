use std::path::Path;
use std::process::{Command, Output};

use randreg_core::io::read_rvol;
use randreg_core::metrics::{dice, foreground_labels};
use randreg_core::volume::warp_labels;

fn randreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_randreg")).args(args).output().expect("spawn randreg")
}

fn ok(args: &[&str]) -> String {
    let out = randreg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|r| r.trim_start_matches(['=', ' ']).trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("{key} missing from {report}"))
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen", "--pairs", "2", "--shape", "8", "--seed", "5", "--out", p(d)]);
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "pair_0001_phi_moving.rvol"));
    assert!(names.iter().any(|n| n == "config.toml"));
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let c = dir.path().join("c");
    ok(&["gen", "--pairs", "1", "--shape", "8", "--seed", "6", "--out", p(&c)]);
    assert_ne!(
        std::fs::read(a.join("pair_0000_fixed.rvol")).unwrap(),
        std::fs::read(c.join("pair_0000_fixed.rvol")).unwrap()
    );
}

#[test]
fn register_then_eval_matches_library_dice() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen", "--pairs", "1", "--shape", "12", "--seed", "3", "--set", "pairs.channels=4", "--out", p(d)]);
    let phi = d.join("phi.rvol");
    let reg = ok(&[
        "register",
        "--fixed",
        p(&d.join("pair_0000_fixed.rvol")),
        "--moving",
        p(&d.join("pair_0000_moving.rvol")),
        "--set",
        "instance.iterations=20",
        "--out",
        p(&phi),
    ]);
    assert!(reg.contains("ndv_percent"));
    assert!(d.join("phi.rvol.config.toml").exists());
    let fl = d.join("pair_0000_fixed_labels.rvol");
    let ml = d.join("pair_0000_moving_labels.rvol");
    let report = ok(&["eval", "--phi", p(&phi), "--fixed-labels", p(&fl), "--moving-labels", p(&ml)]);

    let field = read_rvol(&phi).unwrap().into_field(&phi).unwrap();
    let fixed = read_rvol(&fl).unwrap().into_labels(&fl).unwrap();
    let moving = read_rvol(&ml).unwrap().into_labels(&ml).unwrap();
    let expected =
        dice(&warp_labels(&moving, &field).unwrap(), &fixed, &foreground_labels(moving.label_count())).unwrap();
    assert!((value(&report, "dice_mean") - expected.mean).abs() < 1e-6, "{report}");
    assert!(value(&report, "ndv_percent") >= 0.0);
}

#[test]
fn short_pretrain_writes_curves_that_plot() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let text = ok(&[
        "pretrain",
        "--seed",
        "1",
        "--set",
        "pairs.shape=[8, 8, 8]",
        "--set",
        "model.stages=2",
        "--set",
        "train.epochs=2",
        "--set",
        "train.pairs_per_epoch=2",
        "--out",
        p(&run),
    ]);
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    assert!(run.join("last.ckpt").exists());
    let svg = dir.path().join("c.svg");
    ok(&["curves", "--log", p(&run.join("curves")), "--out", p(&svg), "--window", "2"]);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
}

#[test]
fn selftest_suite_runs() {
    let text = ok(&["selftest", "--suite", "loss-oracles"]);
    assert!(text.contains("selftest passed"), "{text}");
}

#[test]
fn exit_codes() {
    assert_eq!(randreg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(randreg(&["gen", "--out", "/tmp/x", "--set", "pairs.bogus=1"]).status.code(), Some(1));
    assert_eq!(randreg(&["selftest", "--suite", "nope"]).status.code(), Some(1));
    assert_eq!(randreg(&["eval", "--phi", "/nonexistent/phi.rvol"]).status.code(), Some(2));
    assert_eq!(randreg(&["--help"]).status.code(), Some(0));
}
