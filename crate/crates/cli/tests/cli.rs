use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lirlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn torus_config(checks: &[&str]) -> Value {
    json!({
        "version": 1,
        "seed": 11,
        "manifold": { "kind": "flat_torus", "extents": [6.283185307179586, 6.283185307179586] },
        "grid": [32, 32],
        "operator": { "kind": "laplacian" },
        "epsilon": 0.1,
        "m": 2,
        "r": "2",
        "checks": checks,
    })
}

fn report_without_timing(path: &Path) -> Value {
    let mut report: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    report.as_object_mut().unwrap().remove("wall_seconds");
    report
}

#[test]
fn exponents_prints_the_chain_and_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "exponents",
        "--n",
        "3",
        "--m",
        "1",
        "--r",
        "4",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("chain: 2, 6, inf"));
    assert!(stdout.contains("l = 1"));
    let table = std::fs::read_to_string(dir.path().join("exponents.csv")).unwrap();
    assert!(table.contains("t_1,6"));
    assert!(table.contains("v_r_prime"));
}

#[test]
fn full_run_reports_each_check_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &torus_config(&["radius", "cover", "local_estimate"]));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let run = run(&[
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    }

    let report = report_without_timing(&out_a.join("report.json"));
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 3);
    assert!(checks.iter().all(|c| c["pass"].as_bool().unwrap()));
    assert_eq!(report["verdict"], Value::Bool(true));

    let cover = checks.iter().find(|c| c["name"] == "cover").unwrap();
    let overlap = cover["detail"]["max_overlap"].as_u64().unwrap();
    assert!(overlap as f64 <= 17600.0);
    assert!(out_a.join("radius.csv").exists());
    assert!(out_a.join("cover.csv").exists());
    assert!(out_a.join("local_estimate.json").exists());

    assert_eq!(report, report_without_timing(&out_b.join("report.json")));
}

#[test]
fn empty_check_list_yields_a_passing_metadata_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &torus_config(&[]));
    let out = run(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report = report_without_timing(&dir.path().join("out/report.json"));
    assert_eq!(report["checks"].as_array().unwrap().len(), 0);
    assert_eq!(report["verdict"], Value::Bool(true));
    assert_eq!(report["seed"], json!(11));
}

#[test]
fn out_of_range_epsilon_is_rejected_with_the_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = torus_config(&["radius"]);
    config["epsilon"] = json!(1.5);
    let path = write_config(dir.path(), &config);
    let out = run(&[
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("epsilon"), "{stderr}");
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = torus_config(&[]);
    config.as_object_mut().unwrap().remove("seed");
    let path = write_config(dir.path(), &config);
    let out = run(&["--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("seed"), "{stderr}");
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = torus_config(&[]);
    config["radius_sweeps"] = json!([1.0]);
    let path = write_config(dir.path(), &config);
    let out = run(&["--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("radius_sweeps"), "{stderr}");
}

#[test]
fn solve_subcommand_prints_the_residual_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &torus_config(&[]));
    let out = run(&[
        "solve",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("residual"), "{stdout}");
    assert!(dir.path().join("out/solution.csv").exists());
}

#[test]
fn grid_override_changes_the_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &torus_config(&["radius"]));
    let out = run(&[
        "radius",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--grid",
        "16,16",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report = report_without_timing(&dir.path().join("out/report.json"));
    assert_eq!(report["grid"], json!([16, 16]));
}

#[test]
fn boundary_stage_runs_on_the_cylinder() {
    let dir = tempfile::tempdir().unwrap();
    let config_value = json!({
        "version": 1,
        "seed": 7,
        "manifold": {
            "kind": "cylinder_with_boundary",
            "circumference": 6.283185307179586,
            "length": 3.141592653589793,
        },
        "grid": [16, 9],
        "operator": { "kind": "laplacian" },
        "epsilon": 0.1,
        "m": 2,
        "r": "2",
        "checks": ["double"],
    });
    let config = write_config(dir.path(), &config_value);
    let out = run(&[
        "double",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = report_without_timing(&dir.path().join("out/report.json"));
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks[0]["name"], "double");
    let residual = checks[0]["detail"]["spectral_residual"].as_f64().unwrap();
    assert!(residual <= 1e-6);
}

#[test]
fn report_subcommand_rerenders_plots() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &torus_config(&["local_estimate"]));
    let out_dir = dir.path().join("out");
    let run_out = run(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(run_out.status.code(), Some(0));
    let plot_dir = dir.path().join("plots");
    let render = run(&[
        "report",
        "--input",
        out_dir.join("report.json").to_str().unwrap(),
        "--out",
        plot_dir.to_str().unwrap(),
    ]);
    assert_eq!(render.status.code(), Some(0));
    let svgs: Vec<_> = std::fs::read_dir(&plot_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "svg"))
        .collect();
    assert!(!svgs.is_empty());
}

#[test]
fn failing_check_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // The doubling stage cannot run on a torus; the stage error is
    // recorded as a failed check, not a config error.
    let config = write_config(dir.path(), &torus_config(&["double"]));
    let out = run(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let report = report_without_timing(&dir.path().join("out/report.json"));
    assert_eq!(report["verdict"], Value::Bool(false));
    let detail = &report["checks"][0]["detail"];
    assert!(detail["error"].as_str().unwrap().contains("cylinder"));
}
