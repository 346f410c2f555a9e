use std::fs;
use std::process::Command;

fn crfv(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_crfv")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn write_config(dir: &std::path::Path, text: &str) -> String {
    let p = dir.join("run.conf");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn solve_writes_ledgers_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "case = random\nseed = 2\nbox_n = 2\ndt = 0.05\nT = 0.2\noutput_every = 2\n");
    let out = dir.path().join("out");
    let (code, stdout) = crfv(&["solve", &cfg, "--output", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("positivity           PASS"));
    for f in ["mass.csv", "energy.csv", "consistency.csv", "steps.csv", "state_00000.vtk", "state_00004.vtk"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    // four steps plus the initial row
    let mass = fs::read_to_string(out.join("mass.csv")).unwrap();
    assert_eq!(mass.lines().count(), 6);
}

#[test]
fn check_passes_on_default_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "box_n = 2\nkappa = 1\n");
    let (code, stdout) = crfv(&["check", &cfg, "--trials", "5"]);
    assert_eq!(code, 0, "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn solver_failure_exits_two() {
    // one Picard iteration cannot reach the tolerance
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "case = random\nseed = 1\nbox_n = 2\ndt = 0.1\nT = 0.2\nmax_fp = 1\n");
    let out = dir.path().join("out");
    let (code, stdout) = crfv(&["solve", &cfg, "--output", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{stdout}");
    assert!(stdout.contains("solver failure"));
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mu = -1\n");
    assert_eq!(crfv(&["solve", &cfg]).0, 2);
    let cfg = write_config(dir.path(), "no_such_key = 1\n");
    assert_eq!(crfv(&["check", &cfg]).0, 2);
}

#[test]
fn convergence_on_exact_case() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "case = transport\nT = 0.5\n");
    let out = dir.path().join("eoc");
    let (code, stdout) = crfv(&["convergence", &cfg, "--levels", "2,3", "--output", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    assert!(out.join("eoc.csv").exists());
}
