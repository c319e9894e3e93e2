//! Black-box tests of the `logpolar` binary: exit codes, file artifacts,
//! and the printed evaluation numbers.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_logpolar")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary spawns")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("logpolar-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn describe_zero_keypoints_writes_valid_empty_file() {
    let dir = scratch("empty-describe");
    // a tiny 2x2 raw float image and an empty keypoint list
    let img = dir.join("img.rawf32");
    let tiny = logpolar::image::Image::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    std::fs::write(&img, logpolar::image::encode_rawf32(&tiny)).unwrap();
    write(&dir.join("img.kp"), "# x y sigma theta\n");

    let out = dir.join("img.desc");
    let res = run(&[
        "describe",
        "--images",
        img.to_str().unwrap(),
        "--keypoints",
        dir.join("img.kp").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let descs = logpolar::net::decode_descriptors(&std::fs::read(&out).unwrap()).unwrap();
    assert!(descs.is_empty(), "expected an empty descriptor file");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn eval_fpr95_prints_expected_rate_on_hand_built_fixture() {
    let dir = scratch("fpr95");
    // 20 positives: the 95% threshold is the 19th order statistic (0.19);
    // exactly 3 of 10 negatives fall at or below it
    let mut text = String::new();
    for i in 1..=20 {
        text.push_str(&format!("p {}\n", i as f64 / 100.0));
    }
    for d in [0.05, 0.10, 0.15, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8] {
        text.push_str(&format!("n {d}\n"));
    }
    let scores = dir.join("fixture.scores");
    write(&scores, &text);

    let res = run(&["eval-fpr95", "--scores", scores.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(stdout.trim(), "0.3");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unknown_config_key_fails_naming_the_key() {
    let dir = scratch("badcfg");
    let cfg = dir.join("bad.cfg");
    write(&cfg, "learning_rat = 0.1\n");
    let res = run(&["--config", cfg.to_str().unwrap(), "selfcheck"]);
    assert_eq!(res.status.code(), Some(1), "validation errors exit 1");
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(
        stderr.contains("learning_rat"),
        "error must name the offending key, got: {stderr}"
    );
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn missing_input_file_is_a_runtime_failure() {
    let res = run(&["eval-fpr95", "--scores", "/nonexistent/scores.txt"]);
    assert_eq!(res.status.code(), Some(2), "I/O failures exit 2");
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["eval-bins", "--scores", "x"]).status.code(), Some(1), "eval-bins requires --out");
}

#[test]
fn describe_writes_config_snapshot_and_sidecar() {
    let dir = scratch("sidecar");
    let img = dir.join("img.rawf32");
    let data: Vec<f32> = (0..64 * 64).map(|i| (i % 7) as f32 / 7.0).collect();
    let textured = logpolar::image::Image::new(64, 64, data).unwrap();
    std::fs::write(&img, logpolar::image::encode_rawf32(&textured)).unwrap();
    write(&dir.join("img.kp"), "# x y sigma theta\n32.0 32.0 1.2 0.5\n");

    let out = dir.join("img.desc");
    let res = run(&[
        "describe",
        "--images",
        img.to_str().unwrap(),
        "--keypoints",
        dir.join("img.kp").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let descs = logpolar::net::decode_descriptors(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(descs.len(), 1);
    let sidecar = std::fs::read_to_string(dir.join("img.desc.meta")).unwrap();
    assert!(sidecar.contains("logpolar"), "sidecar records the grid kind");
    assert!(dir.join("img.desc.cfg").exists(), "resolved config snapshot written");
    let _ = std::fs::remove_dir_all(&dir);
}
