use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--set",
    "nx=30",
    "--set",
    "nt=60",
    "--set",
    "n_obs=12",
    "--set",
    "n_columns=3",
    "--set",
    "n_mc=2000",
    "--set",
    "lcurve_points=30",
];

fn repvar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repvar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn gcv_selection_on_first_experiment_is_cheap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = repvar(&["select", "--experiment", "1", "--method", "gcv", "--output", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sel = read_json(&dir.path().join("selection.json"));
    let runs = sel["result"]["runs"].as_u64().unwrap();
    assert!(runs <= 60, "runs = {runs}");
    assert!(sel["provenance"]["config_hash"].as_str().unwrap().len() == 64);
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(curve.starts_with("# config_hash="));
    assert_eq!(curve.lines().count(), runs as usize + 2);
}

#[test]
fn validate_passes() {
    let o = repvar(&["validate", "--size", "tiny"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("0 failed"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"id": 2, "perturbation": {"kk": 1.0}}"#).unwrap();
    let o = repvar(&[
        "generate-data",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "config");
    assert_eq!(e["key"], "perturbation.kk");
}

#[test]
fn malformed_override_and_cfl_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = repvar(&["generate-data", "--experiment", "1", "--set", "nx", "--output", out]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["key"], "nx");
    let o = repvar(&["generate-data", "--experiment", "1", "--set", "nx=400", "--output", out]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_json(&o)["error"], "cfl");
}

#[test]
fn ensemble_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("e3");
    let mut args = vec![
        "ensemble",
        "--experiment",
        "3",
        "--seed",
        "11",
        "--output",
        run.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let o = repvar(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "estimates.csv", "rmse.csv", "samples.csv", "config.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let report = read_json(&run.join("report.json"));
    assert_eq!(report["provenance"]["seed"], 11);
    assert_eq!(report["result"]["methods"].as_array().unwrap().len(), 3);

    let rep = dir.path().join("tables");
    let o = repvar(&[
        "report",
        "--input",
        run.join("report.json").to_str().unwrap(),
        "--output",
        rep.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tables = std::fs::read_to_string(rep.join("tables.md")).unwrap();
    assert!(tables.contains("| 3 | iso | gcv |"));
    assert!(tables.contains("| 3 | iso | lcurve |"));
}

#[test]
fn same_seed_gives_identical_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let mut args = vec!["generate-data", "--experiment", "2", "--output", out.to_str().unwrap()];
        args.extend_from_slice(SMALL);
        assert!(repvar(&args).status.success());
        files.push(std::fs::read(out.join("data.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn assimilate_improves_on_the_first_guess() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["assimilate", "--experiment", "3", "--sigma-f2", "0.5", "--output", out];
    args.extend_from_slice(SMALL);
    let o = repvar(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = &read_json(&dir.path().join("summary.json"))["result"];
    let p = &s["penalties"];
    let sum = p["data"].as_f64().unwrap() + p["model"].as_f64().unwrap();
    assert!((sum - p["total"].as_f64().unwrap()).abs() <= 1e-8 * sum);
    assert!(s["rmse_assimilated"].as_f64().unwrap() < s["rmse_first_guess"].as_f64().unwrap());

    let o = repvar(&[
        "assimilate",
        "--experiment",
        "3",
        "--sigma-f2",
        "0.5",
        "--l-f",
        "2",
        "--output",
        out,
    ]);
    assert_eq!(o.status.code(), Some(3));
}
