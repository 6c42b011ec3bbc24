use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CCD: &str = "x1,x2,y
-1,-1,14.61
1,-1,11.02
-1,1,11.83
1,1,9.75
-1.4142135623730951,0,14.91
1.4142135623730951,0,9.21
0,-1.4142135623730951,13.78
0,1.4142135623730951,10.52
0,0,10.04
0,0,9.96
0,0,10.01
0,0,9.98
0,0,10.03
";

fn rsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsm"))
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[test]
fn analyze_reports_every_section() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "ccd.csv", CCD);
    let out = rsm(&[
        "analyze",
        "--data",
        data.to_str().unwrap(),
        "--radius",
        "0.6",
        "--fd-check",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out.stdout);
    for key in [
        "fit",
        "critical_point",
        "sensitivity",
        "asymptotics",
        "diagnostics",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["critical_point"]["status"], "Boundary");
    assert_eq!(v["fit"]["beta_hat"].as_array().unwrap().len(), 6);
    let ci = v["asymptotics"]["confidence_intervals"].as_array().unwrap();
    assert_eq!(ci.len(), 2);
    assert_eq!(
        v["diagnostics"]["sign_comparison"]["fd_agrees_with_derived"],
        true
    );
}

#[test]
fn analyze_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "ccd.csv", CCD);
    let args = [
        "analyze",
        "--data",
        data.to_str().unwrap(),
        "--radius",
        "2",
        "--level",
        "0.9",
    ];
    let a = rsm(&args);
    let b = rsm(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(json(&a.stdout)["critical_point"]["status"], "Interior");
}

#[test]
fn fit_and_optimize_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "ccd.csv", CCD);
    let data = data.to_str().unwrap();
    let fit = rsm(&["fit", "--data", data]);
    assert_eq!(fit.status.code(), Some(0));
    assert_eq!(json(&fit.stdout)["dof"], 7);
    let opt = rsm(&["optimize", "--data", data, "--radius", "0.6"]);
    assert_eq!(opt.status.code(), Some(0));
    let x = json(&opt.stdout)["critical_point"]["x_star"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e.as_f64().unwrap())
        .collect::<Vec<_>>();
    assert!(((x[0] * x[0] + x[1] * x[1]).sqrt() - 0.6).abs() < 1e-10);
}

#[test]
fn simulate_is_reproducible_and_writes_samples() {
    let dir = tempfile::tempdir().unwrap();
    let design = write(dir.path(), "ccd.csv", CCD);
    let truth = write(
        dir.path(),
        "truth.json",
        r#"{"beta": [10, -2, -1.5, 1, 1.5, 0.4], "radius": 0.6}"#,
    );
    let samples = dir.path().join("samples.csv");
    let args = [
        "simulate",
        "--truth",
        truth.to_str().unwrap(),
        "--design",
        design.to_str().unwrap(),
        "--reps",
        "300",
        "--seed",
        "5",
        "--samples-csv",
        samples.to_str().unwrap(),
    ];
    let a = rsm(&args);
    assert_eq!(
        a.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&a.stderr)
    );
    let first_samples = std::fs::read_to_string(&samples).unwrap();
    let b = rsm(&args);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(first_samples, std::fs::read_to_string(&samples).unwrap());
    assert_eq!(
        first_samples.lines().next(),
        Some("replication,status,x1,x2")
    );
    assert_eq!(first_samples.lines().count(), 301);
    let v = json(&a.stdout);
    assert_eq!(v["replications"], 300);
    assert_eq!(v["status_truth"], "Boundary");
}

#[test]
fn non_numeric_cell_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "bad.csv", "x1,x2,y\n1,2,3\n4,five,6\n");
    let out = rsm(&["fit", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    let e = json(&out.stderr);
    assert_eq!(e["error"], "NonNumericCell");
    assert_eq!(e["row"], 3);
    assert_eq!(e["column"], 2);
}

#[test]
fn header_must_list_factors_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "h.csv", "x2,x1,y\n1,2,3\n");
    let out = rsm(&["fit", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out.stderr)["error"], "MissingHeader");
}

#[test]
fn ragged_row_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "r.csv", "x1,x2,y\n1,2,3\n4,5\n");
    let out = rsm(&["fit", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out.stderr)["error"], "RaggedRow");
}

#[test]
fn invalid_arguments_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "ccd.csv", CCD);
    let data = data.to_str().unwrap();
    for args in [
        vec!["analyze", "--data", data, "--radius", "-1"],
        vec!["analyze", "--data", data, "--radius", "1", "--level", "1.5"],
        vec![
            "analyze",
            "--data",
            "/nonexistent/file.csv",
            "--radius",
            "1",
        ],
        vec!["analyze", "--data", data],
        vec!["frobnicate"],
    ] {
        let out = rsm(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn numerical_failures_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut collinear = String::from("x1,x2,y\n");
    for k in 0..10 {
        collinear.push_str(&format!("{k},{k},{}\n", k * k));
    }
    let data = write(dir.path(), "c.csv", &collinear);
    let out = rsm(&["fit", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out.stderr)["error"], "RankDeficient");

    let saddle = |linear: f64| {
        let mut body = String::from("x1,x2,y\n");
        for line in CCD.lines().skip(1) {
            let f: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            body.push_str(&format!(
                "{},{},{}\n",
                f[0],
                f[1],
                f[0] * f[0] - f[1] * f[1] + linear * f[1]
            ));
        }
        body
    };
    // y = x1² − x2²: minimizers ±e₂ on the unit sphere.
    let data = write(dir.path(), "s.csv", &saddle(0.0));
    let data = data.to_str().unwrap();
    let out = rsm(&["optimize", "--data", data, "--radius", "1"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out.stderr)["error"], "NotConvex");
    let out = rsm(&[
        "optimize",
        "--data",
        data,
        "--radius",
        "1",
        "--allow-nonconvex",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out.stderr)["error"], "HardCase");

    // y = x1² − x2² + ½x2: unique minimizer at −e₂.
    let data = write(dir.path(), "t.csv", &saddle(0.5));
    let ok = rsm(&[
        "optimize",
        "--data",
        data.to_str().unwrap(),
        "--radius",
        "1",
        "--allow-nonconvex",
    ]);
    assert_eq!(ok.status.code(), Some(0));
    let x = &json(&ok.stdout)["critical_point"]["x_star"];
    assert!(x[0].as_f64().unwrap().abs() < 1e-8);
    assert!((x[1].as_f64().unwrap() + 1.0).abs() < 1e-8);
}
