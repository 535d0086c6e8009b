use std::path::Path;
use std::process::Command;

fn run(dir: &Path, config: &str, args: &[&str]) -> (i32, String) {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_signorini"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn ladder_beyond_the_cap_exits_with_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stderr) = run(dir.path(), "[ladders]\nfrequency = [0.2, 0.5, 0.95]\n", &["pipeline"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("exceeds the cap"), "{stderr}");
}

#[test]
fn unknown_key_exits_with_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stderr) = run(dir.path(), "[grid]\nnodez = 17\n", &["solve"]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn solve_then_analyze_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[grid]\nnodes = 33\n";
    assert_eq!(run(dir.path(), cfg, &["solve", "--threads", "2"]).0, 0);
    assert!(dir.path().join("out/solution.fld").exists());
    assert_eq!(run(dir.path(), cfg, &["analyze"]).0, 0);
    let (code, _) = run(dir.path(), cfg, &["report"]);
    assert_eq!(code, 0);
    assert!(dir.path().join("out/report.json").exists());
}

#[test]
fn unconverged_solve_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(dir.path(), "[grid]\nnodes = 33\n[solver]\nmax_iter = 2\n", &["solve"]);
    assert_eq!(code, 3);
}

#[test]
fn tol_scale_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stderr) = run(dir.path(), "", &["solve", "--tol-scale", "-1"]);
    assert_eq!(code, 2, "{stderr}");
}
