use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kam_cli::config::{parse_config_str, HamiltonianSpec, RunConfig};
use kam_cli::pipeline::{execute, CSV_FILE, MAP_FILE, PLOT_FILE, REPORT_FILE, RESIDUALS_FILE};
use kam_cli::presets;
use kam_core::SeriesShape;
use serde_json::Value;

fn kam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stdout));
    })
}

/// golden2d at eps0 = 1e-5 with a short, coarse flow check.
const GOLDEN: &str = r#"{
    "hamiltonian": {"preset": {"name": "golden2d"}},
    "omega": [1.0, 1.618033988749895],
    "epsilon": 1e-5,
    "verify": {"flow": {"horizon": 10.0, "stride": 100}}
}"#;

#[test]
fn unperturbed_config_takes_no_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "zero.json",
        r#"{"hamiltonian": {"preset": {"name": "pendulum"}}, "omega": [1.0], "epsilon": 0.0,
            "verify": {"flow": {"horizon": 5.0}}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = kam(&[
        "solve",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = stdout_json(&out);
    assert_eq!(summary["steps"], 0);
    assert_eq!(summary["converged"], true);
    for file in [REPORT_FILE, CSV_FILE, RESIDUALS_FILE, MAP_FILE, PLOT_FILE] {
        assert!(out_dir.join(file).exists(), "{file} missing");
    }
    let csv = fs::read_to_string(out_dir.join(CSV_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,delta_n,eps_n,eps_hat_n,gamma_n,eta_n,ms");
    assert_eq!(lines.len(), 2);
}

#[test]
fn resonant_frequency_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "resonant.json",
        r#"{"hamiltonian": {"preset": {"name": "golden2d"}}, "omega": [1.0, 1.0], "epsilon": 1e-4}"#,
    );
    let out = kam(&[
        "solve",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "resonant");
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"hamiltonian": {"preset": {"name": "pendulum"}}, "epsilon": 1e-4}"#,
    );
    let out = kam(&["solve", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["field"], "omega");

    let cfg = write_config(
        dir.path(),
        "flat.json",
        r#"{"hamiltonian": {"preset": {"name": "pendulum", "twist": 0.0}}, "omega": [1.0], "epsilon": 1e-4}"#,
    );
    let out = kam(&["solve", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["field"], "hamiltonian.preset.twist");

    let out = kam(&[
        "solve",
        "--config",
        dir.path().join("missing.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "golden.json", GOLDEN);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = kam(&[
            "solve",
            "--config",
            &cfg,
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "5",
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        outputs.push((
            fs::read(out_dir.join(CSV_FILE)).unwrap(),
            fs::read(out_dir.join(MAP_FILE)).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn saved_runs_can_be_reverified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "golden.json", GOLDEN);
    let out_dir = dir.path().join("run");
    let out = kam(&[
        "solve",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let solved = stdout_json(&out);
    let report = out_dir.join(REPORT_FILE);
    let out = kam(&["verify", "--run", report.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let checked = stdout_json(&out);
    assert_eq!(checked["passed"], true);
    assert_eq!(checked["freq_err"], solved["verification"]["freq_err"]);
    assert!(checked["sympl_defect"].as_f64().unwrap() < 1e-8);
}

#[test]
fn explicit_series_round_trip_and_match_the_preset() {
    let preset = parse_config_str(GOLDEN).unwrap();
    let shape = SeriesShape::new(2, 16, 4).unwrap();
    let (f0, f1) = presets::build("golden2d", &preset.omega, 1.0, shape).unwrap();
    let explicit = RunConfig {
        hamiltonian: HamiltonianSpec::Series { f0, f1 },
        ..preset.clone()
    };
    let text = serde_json::to_string_pretty(&explicit).unwrap();
    let back = parse_config_str(&text).unwrap();
    assert_eq!(back, explicit);

    let a = execute(&preset, false).unwrap();
    let b = execute(&back, false).unwrap();
    let eps = |o: &kam_cli::pipeline::PipelineOutcome| -> Vec<f64> {
        o.outcome.records.iter().map(|r| r.epsilon).collect()
    };
    assert_eq!(eps(&a), eps(&b));
}

#[test]
fn diophantine_and_selftest_subcommands() {
    let out = kam(&[
        "diophantine",
        "--omega",
        "1,1.618033988749895",
        "--tau",
        "1",
        "--kmax",
        "200",
    ]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert!((v["c_hat"].as_f64().unwrap() - 0.618_033_988_749_895).abs() < 1e-12);
    assert_eq!(v["k_star"], serde_json::json!([1, -1]));

    let out = kam(&["cohomology-selftest", "--seed", "3", "--count", "50"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["cases"], 50);
    assert!(v["max_relative_residual"].as_f64().unwrap() < 1e-12);
}

#[test]
fn sweep_reports_every_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "pendulum.json",
        r#"{"hamiltonian": {"preset": {"name": "pendulum"}}, "omega": [1.0], "epsilon": 1e-4}"#,
    );
    let out_dir = dir.path().join("sweep");
    let out = kam(&[
        "sweep",
        "--config",
        &cfg,
        "--eps",
        "1e-4,1e-3,0.2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 3);
    assert_eq!(points[0]["converged"], true);
    assert_eq!(points[2]["converged"], false);
    assert_eq!(v["boundary"].as_f64(), Some(1e-3));
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
