use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn ccgeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccgeo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("report on stdout")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ccgeo-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn grushin_off_the_singular_line_uses_the_horizontal_pair() {
    let out = ccgeo(&[
        "maximal-tuple",
        "--family",
        "grushin",
        "--point",
        "0.5,0",
        "--radius",
        "0.1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["result"]["tuple"], serde_json::json!([1, 2]));
}

#[test]
fn missing_family_is_a_usage_error() {
    let out = ccgeo(&["maximal-tuple", "--point", "0.5,0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--family"));
}

#[test]
fn unknown_subcommand_and_config_key_are_errors() {
    assert_eq!(ccgeo(&["bogus"]).status.code(), Some(1));
    let dir = scratch("badcfg");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("c.json");
    std::fs::write(&cfg, r#"{"family": "heisenberg", "colour": 1}"#).unwrap();
    let out = ccgeo(&["maximal-tuple", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn inline_family_from_config_with_flag_override() {
    let dir = scratch("inline");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("c.json");
    std::fs::write(
        &cfg,
        r#"{"family": {"dim": 2, "step": 2, "fields": [{"coeffs": ["1", "0"]}, {"coeffs": ["0", "x1"]}],
            "domain_box": [[-1, 1], [-1, 1]]}, "point": [0.0, 0.0], "radius": 0.1}"#,
    )
    .unwrap();
    let out = ccgeo(&["maximal-tuple", "--config", cfg.to_str().unwrap()]);
    assert_eq!(json(&out)["result"]["tuple"], serde_json::json!([1, 3]));
    let out = ccgeo(&[
        "maximal-tuple",
        "--config",
        cfg.to_str().unwrap(),
        "--point",
        "0.5,0",
    ]);
    assert_eq!(json(&out)["result"]["tuple"], serde_json::json!([1, 2]));
}

#[test]
fn bracket_flow_moves_along_the_center() {
    let out = ccgeo(&[
        "flow",
        "--family",
        "heisenberg",
        "--field",
        "3",
        "--time",
        "-0.5",
    ]);
    let p: Vec<f64> = serde_json::from_value(json(&out)["result"]["point"].clone()).unwrap();
    assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && (p[2] + 0.5).abs() < 1e-9);
}

#[test]
fn reports_are_byte_identical_for_the_same_seed() {
    let dir = scratch("det");
    let run = || {
        let args = [
            "doubling",
            "--family",
            "grushin",
            "--point",
            "0.5,0",
            "--samples",
            "150",
            "--seed",
            "5",
            "--out",
        ];
        let mut v: Vec<&str> = args.to_vec();
        let d = dir.to_str().unwrap().to_string();
        v.push(&d);
        let out = ccgeo(&v);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        (
            std::fs::read(dir.join("report.json")).unwrap(),
            std::fs::read(dir.join("data.csv")).unwrap(),
        )
    };
    let (a, ca) = run();
    std::fs::remove_dir_all(&dir).unwrap();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["config"]["seed"], 5);
    assert!(report["version"].is_string());
    assert!(report["result"]["estimate"].as_f64().unwrap() > 1.0);
}

#[test]
fn violated_bound_exits_with_two() {
    let out = ccgeo(&[
        "poincare",
        "--family",
        "grushin",
        "--samples",
        "100",
        "--bound",
        "0.001",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["verdict"], "falsified");
}

#[test]
fn single_suite_criterion_on_the_plane() {
    let out = ccgeo(&["suite", "--family", "euclid2in3", "--only", "doubling"]);
    assert_eq!(out.status.code(), Some(0));
    let crit = &json(&out)["result"]["criteria"];
    assert_eq!(crit.as_array().unwrap().len(), 1);
    assert!((crit[0]["measured"].as_f64().unwrap() - 4.0).abs() < 0.4);
    assert_eq!(crit[0]["passed"], true);
}

#[test]
fn thread_cap_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_ccgeo"))
        .args(["maximal-tuple", "--family", "heisenberg"])
        .env("CCGEO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
