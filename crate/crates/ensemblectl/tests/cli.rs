//! Black-box tests of the `ensemblectl` binary: exit-code contract,
//! artifact layout, and input validation.

use std::path::Path;
use std::process::{Command, Output};

fn ensemblectl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ensemblectl"))
        .args(args)
        .current_dir(dir)
        .env("ENSEMBLECTL_THREADS", "1")
        .output()
        .expect("failed to launch binary")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write(dir: &Path, name: &str, contents: &str) {
    std::fs::write(dir.join(name), contents).unwrap();
}

const ZERO_PULSE: &str = "t,u,v\n0.0,0.0,0.0\n1.0,0.0,0.0\n2.0,0.0,0.0\n";

#[test]
fn solve_time_varying_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "run.toml",
        r#"
        output_dir = "out"
        formats = ["pulse_csv", "robustness_csv", "manifest_json", "physical_pulse_csv"]
        nominal_amplitude_hz = 10000.0
        [study]
        name = "time_varying"
        orders = [16, 0, 0]
        cost = "energy"
        "#,
    );
    let out = ensemblectl(&["solve", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    for name in [
        "pulse.csv",
        "pulse_physical.csv",
        "robustness.csv",
        "manifest.json",
    ] {
        assert!(dir.path().join("out").join(name).exists(), "missing {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["passed"], serde_json::Value::Bool(true));
    assert_eq!(manifest["config"]["study"]["name"], "time_varying");
    let pulse_first = std::fs::read(dir.path().join("out/pulse.csv")).unwrap();

    // Re-running the embedded config reproduces byte-identical outputs.
    let rerun = tempfile::tempdir().unwrap();
    let mut config = manifest["config"].clone();
    config["output_dir"] = serde_json::json!("out2");
    let toml_text = toml::to_string(&config).unwrap();
    write(rerun.path(), "run.toml", &toml_text);
    let out = ensemblectl(&["solve", "run.toml"], rerun.path());
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let pulse_second = std::fs::read(rerun.path().join("out2/pulse.csv")).unwrap();
    assert_eq!(pulse_first, pulse_second);
}

#[test]
fn solve_rejects_invalid_delta_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "run.toml",
        r#"
        output_dir = "out"
        [study]
        name = "robust_pi"
        delta = 1.2
        "#,
    );
    let out = ensemblectl(&["solve", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bloch.delta"), "stderr: {}", stderr(&out));
    assert!(!dir.path().join("out").join("manifest.json").exists());
}

#[test]
fn solve_rejects_physical_export_without_amplitude() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "run.toml",
        r#"
        output_dir = "out"
        formats = ["pulse_csv", "physical_pulse_csv"]
        [study]
        name = "time_varying"
        "#,
    );
    let out = ensemblectl(&["solve", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nominal_amplitude_hz"));
}

#[test]
fn threshold_failure_exits_2() {
    // A deliberately under-resolved convergence sweep cannot reach the
    // 0.99 target at its finest cell.
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "run.toml",
        r#"
        output_dir = "out"
        formats = ["convergence_csv", "manifest_json"]
        [study]
        name = "convergence"
        [study.sweep]
        time_orders = [2, 3]
        omega_orders = [1]
        "#,
    );
    let out = ensemblectl(&["convergence", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(dir.path().join("out/convergence.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["passed"], serde_json::Value::Bool(false));
}

#[test]
fn convergence_command_requires_convergence_study() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "run.toml",
        r#"
        output_dir = "out"
        [study]
        name = "robust_pi"
        "#,
    );
    let out = ensemblectl(&["convergence", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("convergence"));
}

#[test]
fn validate_zero_pulse_reports_no_inversion() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pulse.csv", ZERO_PULSE);
    let out = ensemblectl(
        &["validate", "pulse.csv", "--target", "-z", "--grid", "5x3"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    // M stays at +z, so the score against −z is exactly −1.
    assert!(
        stdout(&out).contains("average score -1.000000"),
        "stdout: {}",
        stdout(&out)
    );
}

#[test]
fn validate_rejects_non_monotone_time_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pulse.csv", "t,u,v\n0.0,1.0,0.0\n0.5,1.0,0.0\n0.5,1.0,0.0\n");
    let out = ensemblectl(&["validate", "pulse.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 4"), "stderr: {}", stderr(&out));
}

#[test]
fn export_physical_scales_duration_inversely_with_amplitude() {
    let dir = tempfile::tempdir().unwrap();
    // A constant pulse over the dimensionless duration 7.5398.
    let mut pulse = String::from("t,u,v\n");
    for i in 0..=20 {
        pulse.push_str(&format!("{},1.0,0.0\n", 7.5398 * i as f64 / 20.0));
    }
    write(dir.path(), "pulse.csv", &pulse);

    let spans: Vec<f64> = [10_000.0f64, 20_000.0]
        .iter()
        .map(|&amp| {
            let name = format!("out_{amp}.csv");
            let out = ensemblectl(
                &[
                    "export-physical",
                    "pulse.csv",
                    "--amp-hz",
                    &amp.to_string(),
                    "--out",
                    &name,
                ],
                dir.path(),
            );
            assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
            let text = std::fs::read_to_string(dir.path().join(&name)).unwrap();
            let last = text.lines().last().unwrap();
            last.split(',').next().unwrap().parse::<f64>().unwrap()
        })
        .collect();
    assert!((spans[0] - 120e-6).abs() < 1e-9, "10 kHz span {}", spans[0]);
    assert!((spans[1] - 60e-6).abs() < 1e-9, "20 kHz span {}", spans[1]);
}

#[test]
fn export_physical_rejects_nonpositive_amplitude() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pulse.csv", ZERO_PULSE);
    let out = ensemblectl(&["export-physical", "pulse.csv", "--amp-hz", "0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("amplitude"));
}

#[test]
fn default_export_path_appends_physical_suffix() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pulse.csv", ZERO_PULSE);
    let out = ensemblectl(&["export-physical", "pulse.csv", "--amp-hz", "1000"], dir.path());
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(dir.path().join("pulse_physical.csv").exists());
}
