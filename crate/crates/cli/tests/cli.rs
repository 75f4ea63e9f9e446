use std::path::Path;
use std::process::{Command, Output};

fn gridcast(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gridcast"));
    cmd.args(args).env_remove("GRIDCAST_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

const SMALL: &str = r#"
[run]
methods = ["tree", "persistence"]

[synthetic]
days = 12

[tree]
cv_folds = 2
cv_min_leaf = [4, 8]
"#;

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

fn report_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn synth_writes_stream_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let o = gridcast(&["synth", "--seed", "3", "--days", "2", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("synthetic.json").exists());
    let csvs = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv")).count();
    assert_eq!(csvs, 5);
}

#[test]
fn small_run_writes_report_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    let o = gridcast(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("config.toml").exists());
    assert!(out.join("plots/forecast_tree.csv").exists());
    assert!(out.join("plots/registry.json").exists());
    let r = report_json(&out);
    assert_eq!(r["provenance"]["master_seed"], 42);
    assert_eq!(r["methods"].as_array().unwrap().len(), 2);

    let o = gridcast(&["report", "--in", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("tree") && stdout.contains("persistence"), "{stdout}");
    assert!(o.stderr.is_empty(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    let o = gridcast(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[("GRIDCAST_SEED", "7")]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(report_json(&out)["provenance"]["master_seed"], 7);

    let o = gridcast(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[("GRIDCAST_SEED", "seven")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    for body in ["[run]\nbogus = 1\n", "[tree]\ntrain_fraction = 1.5\n", "not toml ["] {
        let cfg = write_config(tmp.path(), body);
        let o = gridcast(&["run", "--config", &cfg, "--out", tmp.path().join("r").to_str().unwrap()], &[]);
        assert_eq!(o.status.code(), Some(2), "{body}");
    }
    let o = gridcast(&["run", "--config", tmp.path().join("absent.toml").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("[data]\nsource = \"csv\"\ncsv_dir = {:?}\n", tmp.path().join("nothing").to_str().unwrap());
    let cfg = write_config(tmp.path(), &body);
    let o = gridcast(&["run", "--config", &cfg, "--out", tmp.path().join("r").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    let o = gridcast(&["report", "--in", tmp.path().join("nothing").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn failing_method_exits_four_and_still_reports() {
    let tmp = tempfile::tempdir().unwrap();
    // 12 days cannot hold a single 60-day training window.
    let body = SMALL.replace("[\"tree\", \"persistence\"]", "[\"arima\", \"persistence\"]");
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("run");
    let o = gridcast(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report_json(&out);
    let arima = r["methods"].as_array().unwrap().iter().find(|m| m["method"] == "arima").unwrap();
    assert_eq!(arima["status"], "failed");
    assert!(arima["error"].is_string());
}
