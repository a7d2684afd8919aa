use std::path::Path;
use std::process::{Command, Output};

use bumpkit::pde::DiscreteField;
use serde_json::Value;
use tempfile::TempDir;

fn bumpkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bumpkit"))
        .args(args)
        .output()
        .expect("running bumpkit")
}

fn out_dir(tmp: &TempDir, name: &str) -> String {
    tmp.path().join(name).to_string_lossy().into_owned()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(tmp: &TempDir, name: &str, text: &str) -> String {
    let path = tmp.path().join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const RING: &str =
    r#"{"n":1,"geometry":{"type":"torus","periods":[36]},"points":[[0],[12.3],[23.8]]}"#;

#[test]
fn ground_state_reports_closed_form_peak() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "gs");
    let res = bumpkit(&["--out-dir", &out, "ground-state", "--n", "1", "--p", "3"]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let report = read_json(Path::new(&out).join("ground_state.json"));
    let w0 = report["result"]["w0"].as_f64().unwrap();
    assert!((w0 - std::f64::consts::SQRT_2).abs() < 1e-6);
    assert_eq!(report["spec"]["p"], 3.0);
    assert_eq!(report["run"]["seed"], 0);
    let profile = read_json(Path::new(&out).join("profile.json"));
    assert!(profile["asympt_C"].is_number());
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str, seed: &str| {
        let out = out_dir(&tmp, name);
        let res = bumpkit(&[
            "--out-dir",
            &out,
            "--seed",
            seed,
            "relax",
            "--random",
            "6",
            "--period",
            "60",
        ]);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        (
            std::fs::read(Path::new(&out).join("relax.json")).unwrap(),
            std::fs::read(Path::new(&out).join("relax_trace.csv")).unwrap(),
        )
    };
    let a = run("a", "11");
    let b = run("b", "11");
    let c = run("c", "12");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    let report: Value = serde_json::from_slice(&a.0).unwrap();
    assert_eq!(report["result"]["status"], "converged");
    assert!(report["result"]["max_residual"].as_f64().unwrap() < 1e-10);
}

#[test]
fn pipeline_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = out_dir(&tmp, name);
        let res = bumpkit(&["--out-dir", &out, "pipeline", "--separations", "10,12"]);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        std::fs::read(Path::new(&out).join("pipeline.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("D,max_balance_residual,projection_ratio,phi_slope_partial,status\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "bad.json", "{not json");
    let out = out_dir(&tmp, "never");
    let res = bumpkit(&["--config", &cfg, "--out-dir", &out, "ground-state"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!Path::new(&out).exists());

    let cfg = write(&tmp, "typo.json", r#"{"ground-state": {"pp": 2}}"#);
    let res = bumpkit(&["--config", &cfg, "--out-dir", &out, "ground-state"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!Path::new(&out).exists());
}

#[test]
fn invalid_parameters_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "x");
    let res = bumpkit(&["--out-dir", &out, "ground-state", "--n", "3", "--p", "6"]);
    assert_eq!(res.status.code(), Some(2));
    let res = bumpkit(&["--out-dir", &out, "relax"]);
    assert_eq!(res.status.code(), Some(2));
    let res = bumpkit(&["--out-dir", &out, "no-such-command"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!Path::new(&out).exists());
}

#[test]
fn command_line_overrides_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        &tmp,
        "cfg.json",
        r#"{"seed": 9, "ground-state": {"p": 2.0}}"#,
    );
    let out = out_dir(&tmp, "cfg");
    assert!(
        bumpkit(&["--config", &cfg, "--out-dir", &out, "ground-state"])
            .status
            .success()
    );
    let report = read_json(Path::new(&out).join("ground_state.json"));
    assert!((report["result"]["w0"].as_f64().unwrap() - 1.5).abs() < 1e-6);
    assert_eq!(report["run"]["seed"], 9);

    let out = out_dir(&tmp, "cli");
    let res = bumpkit(&[
        "--config",
        &cfg,
        "--out-dir",
        &out,
        "--seed",
        "4",
        "ground-state",
        "--p",
        "3",
    ]);
    assert!(res.status.success());
    let report = read_json(Path::new(&out).join("ground_state.json"));
    assert!((report["result"]["w0"].as_f64().unwrap() - 2f64.sqrt()).abs() < 1e-6);
    assert_eq!(report["run"]["seed"], 4);
}

#[test]
fn empty_separation_list_gives_header_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "cfg.json", r#"{"pipeline": {"separations": []}}"#);
    let out = out_dir(&tmp, "empty");
    let res = bumpkit(&["--config", &cfg, "--out-dir", &out, "pipeline"]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let text = std::fs::read_to_string(Path::new(&out).join("pipeline.csv")).unwrap();
    assert_eq!(
        text,
        "D,max_balance_residual,projection_ratio,phi_slope_partial,status\n"
    );
}

#[test]
fn solve_writes_a_readable_field() {
    let tmp = TempDir::new().unwrap();
    let centers = write(&tmp, "ring.json", RING);
    let out = out_dir(&tmp, "solve");
    let res = bumpkit(&[
        "--out-dir",
        &out,
        "solve",
        "--p",
        "1.5",
        "--centers",
        &centers,
        "--grid",
        "h=0.05,extent=36,bc=periodic",
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let bytes = std::fs::read(Path::new(&out).join("field.bin")).unwrap();
    let field = DiscreteField::read_binary(&bytes[..]).unwrap();
    assert_eq!(field.values.len(), 720);
    let report = read_json(Path::new(&out).join("solve.json"));
    assert!(report["result"]["residual"].as_f64().unwrap() < 1e-10);
    assert_eq!(report["result"]["peaks"].as_array().unwrap().len(), 3);
    assert_eq!(report["spec"]["grid"]["bc"], "periodic");
}

#[test]
fn newton_failure_exits_3() {
    let tmp = TempDir::new().unwrap();
    let centers = write(&tmp, "ring.json", RING);
    let out = out_dir(&tmp, "fail");
    let res = bumpkit(&[
        "--out-dir",
        &out,
        "solve",
        "--p",
        "1.5",
        "--centers",
        &centers,
        "--max-iters",
        "1",
        "--tol",
        "1e-14",
    ]);
    assert_eq!(
        res.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(!Path::new(&out).exists());
}

#[test]
fn verify_flags_unbalanced_points() {
    let tmp = TempDir::new().unwrap();
    let points = write(&tmp, "ring.json", RING);
    let out = out_dir(&tmp, "verify");
    assert!(bumpkit(&["--out-dir", &out, "verify", "--points", &points])
        .status
        .success());
    let report = read_json(Path::new(&out).join("verify.json"));
    assert_eq!(report["result"]["all_pass"], false);
    assert_eq!(report["result"]["distances"]["D"], 11.5);
}
