//! End-to-end checks of the `wlq` binary: subcommand plumbing, exit codes,
//! persisted outputs, and bit-level determinism across runs and thread counts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn wlq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wlq"))
}

fn scalar_problem() -> String {
    r#"
n = 1
m = 1
A = [0.0]
B = [1.0]
C = [0.0]
D = [0.0]
E = 2.0
F = 0.0
Q = [1.0]
S = [0.0]
R = [1.0]
t0 = 0.0
x0 = [1.0]
"#
    .to_string()
}

struct TempDir(PathBuf);

impl TempDir {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("wlq_pipeline_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        TempDir(dir)
    }

    fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

#[test]
fn validate_pass_and_fail_exit_codes() {
    let tmp = TempDir::new("validate");
    let good = tmp.path().join("good.toml");
    fs::write(&good, scalar_problem()).unwrap();
    let out = wlq()
        .args(["validate"])
        .arg(&good)
        .args(["--quiet", "--out"])
        .arg(tmp.path().join("good_run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(tmp.path().join("good_run/manifest.toml").exists());
    assert!(tmp.path().join("good_run/validation.toml").exists());
    assert!(tmp.path().join("good_run/report.txt").exists());

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, scalar_problem().replace("R = [1.0]", "R = [0.0]")).unwrap();
    let out = wlq()
        .args(["validate"])
        .arg(&bad)
        .args(["--quiet", "--out"])
        .arg(tmp.path().join("bad_run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let report = fs::read_to_string(tmp.path().join("bad_run/report.txt")).unwrap();
    assert!(
        report.contains("not positive definite") && report.contains("R"),
        "report should name NotPositiveDefinite(R): {report}"
    );
}

#[test]
fn unknown_problem_field_is_rejected() {
    let tmp = TempDir::new("unknown_field");
    let problem = tmp.path().join("extra.toml");
    fs::write(&problem, format!("{}\nmystery = 3\n", scalar_problem())).unwrap();
    let out = wlq()
        .args(["validate"])
        .arg(&problem)
        .args(["--quiet", "--out"])
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synthesize_then_verify_round_trip() {
    let tmp = TempDir::new("synth_verify");
    let problem = tmp.path().join("p.toml");
    fs::write(&problem, scalar_problem()).unwrap();
    let syn_dir = tmp.path().join("syn");
    let out = wlq()
        .args(["synthesize"])
        .arg(&problem)
        .args(["--quiet", "--out"])
        .arg(&syn_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let gain = syn_dir.join("synthesis.toml");
    let text = fs::read_to_string(&gain).unwrap();
    assert!(text.contains("theta"));
    assert!(syn_dir.join("eta_vbar.csv").exists());

    let out = wlq()
        .args(["verify"])
        .arg(&problem)
        .args(["--gain-file"])
        .arg(&gain)
        .args(["--paths", "200", "--perturbations", "3", "--quiet", "--out"])
        .arg(tmp.path().join("verify_ok"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");

    // Corrupt the gain: verification must fail with exit code 3.
    let corrupted = text.replace(
        text.lines()
            .find(|l| l.starts_with("theta"))
            .expect("theta line"),
        "theta = [0.2]",
    );
    let bad_gain = tmp.path().join("bad_gain.toml");
    fs::write(&bad_gain, corrupted).unwrap();
    let out = wlq()
        .args(["verify"])
        .arg(&problem)
        .args(["--gain-file"])
        .arg(&bad_gain)
        .args(["--paths", "200", "--perturbations", "3", "--quiet", "--out"])
        .arg(tmp.path().join("verify_bad"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn simulate_outputs_are_deterministic_across_thread_counts() {
    let tmp = TempDir::new("determinism");
    let problem = tmp.path().join("p.toml");
    fs::write(&problem, scalar_problem()).unwrap();
    let mut outputs = Vec::new();
    for (tag, threads) in [("t1", "1"), ("t4", "4"), ("again", "4")] {
        let dir = tmp.path().join(tag);
        let out = wlq()
            .env("RLQ_THREADS", threads)
            .args(["simulate"])
            .arg(&problem)
            .args([
                "--control",
                "closed-loop",
                "--paths",
                "64",
                "--tmax",
                "2.0",
                "--dump-paths",
                "4",
                "--seed",
                "7",
                "--quiet",
                "--out",
            ])
            .arg(&dir)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{out:?}");
        outputs.push((
            fs::read(dir.join("trajectories.csv")).unwrap(),
            fs::read_to_string(dir.join("report.toml")).unwrap(),
        ));
    }
    assert_eq!(
        outputs[0].0, outputs[1].0,
        "trajectories differ across thread counts"
    );
    assert_eq!(
        outputs[1].0, outputs[2].0,
        "trajectories differ across reruns"
    );
    assert_eq!(
        outputs[0].1, outputs[1].1,
        "reports differ across thread counts"
    );
    assert_eq!(outputs[1].1, outputs[2].1, "reports differ across reruns");
}

#[test]
fn open_loop_control_file_is_accepted() {
    let tmp = TempDir::new("open_loop");
    let problem = tmp.path().join("p.toml");
    fs::write(&problem, scalar_problem()).unwrap();
    let control = tmp.path().join("u.csv");
    fs::write(&control, "s,u_1\n0.0,-0.4\n10.0,-0.4\n").unwrap();
    let out = wlq()
        .args(["simulate"])
        .arg(&problem)
        .arg("--control")
        .arg(format!("file:{}", control.display()))
        .args(["--paths", "16", "--tmax", "1.0", "--quiet", "--out"])
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let csv = fs::read_to_string(tmp.path().join("run/trajectories.csv")).unwrap();
    let second_line = csv.lines().nth(1).unwrap();
    assert!(
        second_line.contains("-0.4"),
        "control column missing: {second_line}"
    );
}

#[test]
fn reduce_reports_phi_and_superposition() {
    let tmp = TempDir::new("reduce");
    let problem = tmp.path().join("p.toml");
    fs::write(
        &problem,
        r#"
n = 1
m = 1
A = [-1.0]
B = [0.0]
C = [0.0]
D = [0.0]
E = 1.0
F = 0.0
Q = [1.0]
S = [0.0]
R = [1.0]
t0 = 0.0
x0 = [0.5]

[b]
kind = "constant"
value = [1.0]
"#,
    )
    .unwrap();
    let dir = tmp.path().join("run");
    let out = wlq()
        .args(["reduce"])
        .arg(&problem)
        .args(["--paths", "16", "--tmax", "20", "--quiet", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let toml_text = fs::read_to_string(dir.join("reduce.toml")).unwrap();
    let phi: f64 = toml_text
        .lines()
        .find(|l| l.starts_with("phi_mean"))
        .and_then(|l| l.split('=').nth(1))
        .and_then(|v| v.trim().parse().ok())
        .unwrap();
    assert!((phi - 1.0 / 3.0).abs() < 5e-3, "phi = {phi}");
    assert!(dir.join("qhat_rhat.csv").exists());
}

#[test]
fn demo_runs_clean() {
    let tmp = TempDir::new("demo");
    let out = wlq()
        .args(["demo", "--out"])
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("0.414214"),
        "demo table missing oracle value: {stdout}"
    );
    assert!(stdout.contains("PASS"));
}
