use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn eac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eac")).args(args).env_remove("EAC_WORKERS").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, scheme: &str) -> String {
    let path = dir.join(format!("{scheme}.json"));
    let cfg = format!(
        r#"{{"scheme": "{scheme}", "d": 4, "k": 2, "epochs_max": 2, "patience": 1, "batch_size": 16,
            "window": {{"t_in": 12, "t_out": 12, "stride": 8}}}}"#
    );
    std::fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = "n0=6,growth=2,periods=2,T=240";

#[test]
fn missing_scheme_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"d": 8}"#).unwrap();
    let out = dir.path().join("out");
    let o = eac(&["run", "--config", cfg.to_str().unwrap(), "--synth", SMALL, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("`scheme`"), "{}", stderr(&o));
    assert!(json(&out.join("manifest.json"))["error"].as_str().unwrap().contains("scheme"));
}

#[test]
fn data_errors_exit_2_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "EAC");
    let data = dir.path().join("data");
    assert!(eac(&["synth", "--spec", SMALL, "--out", data.to_str().unwrap()]).status.success());
    let obs = data.join("period-1/observations.csv");
    let text = std::fs::read_to_string(&obs).unwrap();
    // drop the first node's column
    let mut cut = String::new();
    for line in text.lines() {
        let mut cells: Vec<&str> = line.split(',').collect();
        cells.remove(1);
        cut.push_str(&(cells.join(",") + "\n"));
    }
    std::fs::write(&obs, cut).unwrap();
    let stream = data.join("stream.json");
    let o = eac(&["run", "--config", &cfg, "--data", stream.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("observations.csv") && stderr(&o).contains("n0000"), "{}", stderr(&o));

    let bad = dir.path().join("pool.txt");
    std::fs::write(&bad, "not a pool\n").unwrap();
    let o = eac(&["analyze", "--what", "svd", "--pool", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn corrupted_gradient_is_named() {
    let o = eac(&["gradcheck", "--seeds", "1", "--corrupt", "temporal_conv"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("temporal_conv"), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn files_on_disk_and_inline_synth_give_the_same_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "EAC");
    let data = dir.path().join("data");
    assert!(eac(&["synth", "--spec", SMALL, "--out", data.to_str().unwrap()]).status.success());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stream = data.join("stream.json");
    assert!(eac(&["run", "--config", &cfg, "--data", stream.to_str().unwrap(), "--out", a.to_str().unwrap(), "--seeds", "4"]).status.success());
    assert!(eac(&["run", "--config", &cfg, "--synth", SMALL, "--out", b.to_str().unwrap(), "--seeds", "4"]).status.success());
    assert_eq!(json(&a.join("report.json"))["periods"], json(&b.join("report.json"))["periods"]);
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 1 + 1 + 3 * 2);
    assert!(manifest["error"].is_null());
}

#[test]
fn several_seeds_fill_the_std_fields_and_the_saved_pool_analyzes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "EAC");
    let out = dir.path().join("out");
    let o = eac(&["run", "--config", &cfg, "--synth", SMALL, "--out", out.to_str().unwrap(), "--seeds", "1,2,3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&out.join("report.json"));
    let periods = report["periods"].as_array().unwrap();
    assert_eq!(periods.len(), 2);
    for p in periods {
        for h in p["horizons"].as_array().unwrap() {
            assert!(h["mae"]["std"].as_f64().unwrap() > 0.0);
        }
    }
    assert!(json(&out.join("timings.json"))["periods"].as_array().unwrap().len() == 2);

    let pool = out.join("seeds/seed-2/pool-period-2.txt");
    let o = eac(&["analyze", "--what", "svd", "--pool", pool.to_str().unwrap(), "--k", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svd = json(&dir.path().join("svd.json"));
    assert_eq!(svd["cumulative_ratio"].as_array().unwrap().last().unwrap().as_f64(), Some(1.0));
}

#[test]
fn prop2_reports_rate_quantiles_and_floor() {
    let dir = tempfile::tempdir().unwrap();
    let o = eac(&["analyze", "--what", "prop2", "--k", "6", "--epsilon", "0.9", "--trials", "200", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&dir.path().join("prop2.json"));
    let rate = r["empirical_success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert_eq!(r["error_quantiles"].as_array().unwrap().len(), 5);
    assert!(r["svd_floor"].as_f64().unwrap() > 0.0);
    let rows = std::fs::read_to_string(dir.path().join("prop2.csv")).unwrap();
    assert_eq!(rows.lines().count(), 201);
}

#[test]
fn bad_worker_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "EAC");
    let o = Command::new(env!("CARGO_BIN_EXE_eac"))
        .args(["run", "--config", &cfg, "--synth", SMALL, "--out", dir.path().join("o").to_str().unwrap()])
        .env("EAC_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("EAC_WORKERS"));
}
