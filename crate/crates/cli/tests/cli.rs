use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gom"))
        .current_dir(dir)
        .env_remove("GOM_THREADS")
        .arg("--no-timestamp")
        .args(args)
        .output()
        .expect("gom runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn example_moments(dir: &Path) {
    let out = gom(dir, &["synth", "--example", "--moments-out", "m.json", "--report", "r.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn verify_example_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = gom(dir.path(), &["verify-example", "-o", "v.json", "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("v.json"));
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["passed"] == true));
    assert!(checks.iter().any(|c| c["name"].as_str().unwrap().starts_with("beta ")));
    assert_eq!(json(&dir.path().join("r.json"))["format_version"], 1);
}

#[test]
fn fit_and_predict_the_example() {
    let dir = tempfile::tempdir().unwrap();
    example_moments(dir.path());
    let out = gom(
        dir.path(),
        &["fit", "--moments", "m.json", "--basis-columns", "0,0,0;0,0,2", "-o", "model.json", "--report", "f.json"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let model = json(&dir.path().join("model.json"));
    assert_eq!(model["k"], 2);
    assert_eq!(model["arithmetic"], "rational");

    let out = gom(dir.path(), &["predict", "--model", "model.json", "--cell", "1,0,0", "-o", "p.json"]);
    assert_eq!(out.status.code(), Some(0));
    let p = json(&dir.path().join("p.json"));
    let e: Vec<f64> = p["expectation_f64"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let sd: Vec<f64> = p["std_dev"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((e[0] - 2.3818).abs() < 5e-5 && (e[1] + 1.3818).abs() < 5e-5);
    assert!((sd[0] - 1.6018).abs() < 5e-5 && (sd[1] - 1.6018).abs() < 5e-5);
    assert_eq!(p["expectation"][0], "131/55");

    let out = gom(dir.path(), &["predict", "--model", "model.json", "--cell", "0,0,0", "-o", "u.json"]);
    assert_eq!(out.status.code(), Some(0));
    let u = json(&dir.path().join("u.json"));
    assert_eq!(u["expectation"], serde_json::json!(["1", "0"]));
}

#[test]
fn complete_cell_is_a_prediction_failure() {
    let dir = tempfile::tempdir().unwrap();
    example_moments(dir.path());
    let out = gom(dir.path(), &["fit", "--moments", "m.json", "-o", "model.json", "--report", "f.json"]);
    assert!(out.status.success());
    let out = gom(dir.path(), &["predict", "--model", "model.json", "--cell", "1,2,1", "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not identifiable"));
    assert_eq!(json(&dir.path().join("r.json"))["status"]["code"], 4);
}

#[test]
fn overspecified_k_is_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    example_moments(dir.path());
    let out = gom(dir.path(), &["fit", "--moments", "m.json", "--k", "5", "-o", "x.json", "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(3));
    let report = json(&dir.path().join("r.json"));
    assert!(report["diagnostics"]["stage_error"].as_str().unwrap().contains("rank 5"));
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn bad_record_names_its_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("a,b\n");
    for _ in 0..6 {
        csv.push_str("1,2\n");
    }
    csv.push_str("3,1\n");
    fs::write(dir.path().join("bad.csv"), csv).unwrap();
    fs::write(dir.path().join("s.json"), r#"{"outcomes":[2,2]}"#).unwrap();
    let out = gom(
        dir.path(),
        &["tabulate", "--input", "bad.csv", "--scheme", "s.json", "--report", "r.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 7"));
}

#[test]
fn tabulate_respects_max_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = gom(
        dir.path(),
        &["synth", "--example", "--n", "500", "--seed", "1", "-o", "s.csv", "--report", "r.json"],
    );
    assert!(out.status.success());
    let out = gom(dir.path(), &["tabulate", "--input", "s.csv", "--max-order", "2", "-o", "t.json"]);
    assert_eq!(out.status.code(), Some(0));
    let t = json(&dir.path().join("t.json"));
    let cells = t["cells"].as_array().unwrap();
    assert!(cells.iter().all(|c| {
        c["cell"].as_array().unwrap().iter().filter(|v| v.as_u64() != Some(0)).count() <= 2
    }));
    assert_eq!(cells.len(), 1 + 6 + 12);
    assert_eq!(t["records"], 500);
}

#[test]
fn synth_is_deterministic_and_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["synth", "--random", "--outcomes", "2,3,2,2", "--k", "2", "--n", "300", "--seed", "9"];
    let a = gom(dir.path(), &args);
    let b = gom(dir.path(), &args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("X1,X2,X3,X4"));
    assert_eq!(lines.count(), 300);
}

#[test]
fn refine_reports_residuals_and_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = gom(
        dir.path(),
        &["synth", "--example", "--n", "3000", "--seed", "4", "-o", "s.csv", "--report", "r.json"],
    );
    assert!(out.status.success());
    let fit = |name: &str, report: &str| {
        gom(
            dir.path(),
            &[
                "fit", "--input", "s.csv", "--arithmetic", "float", "--k", "2", "--basis-columns", "0,0,0;0,0,2",
                "--refine", "-o", name, "--report", report,
            ],
        )
    };
    let out = fit("a.json", "ra.json");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("ra.json"));
    let r = &report["diagnostics"]["refinement"];
    assert!(r["final_residual"].as_f64().unwrap() <= r["initial_residual"].as_f64().unwrap());
    assert!(fit("b.json", "rb.json").status.success());
    assert_eq!(
        fs::read(dir.path().join("a.json")).unwrap(),
        fs::read(dir.path().join("b.json")).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join("ra.json")).unwrap().len(),
        fs::read(dir.path().join("rb.json")).unwrap().len()
    );
}

#[test]
fn threads_flag_does_not_change_the_model() {
    let dir = tempfile::tempdir().unwrap();
    example_moments(dir.path());
    for (t, name) in [("1", "one.json"), ("4", "four.json")] {
        let out = gom(
            dir.path(),
            &["--threads", t, "fit", "--moments", "m.json", "-o", name, "--report", "r.json"],
        );
        assert!(out.status.success());
    }
    let strip = |p: &str| {
        let mut v = json(&dir.path().join(p));
        v["config"]["threads"] = Value::Null;
        v
    };
    assert_eq!(strip("one.json"), strip("four.json"));
}
