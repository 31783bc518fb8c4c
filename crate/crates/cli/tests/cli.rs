use std::process::{Command, Output};

fn mixerlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixerlab")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn verify_passes_with_default_seed() {
    let out = mixerlab(&["verify", "--instances", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["passed"], true);
    assert_eq!(v["schema_version"], 1);
}

#[test]
fn injected_fault_exits_one_and_names_the_check() {
    let out = mixerlab(&["verify", "--instances", "10", "--inject-fault", "z-sign"]);
    assert_eq!(out.status.code(), Some(1));
    let v = json(&out);
    let failed: Vec<&str> = v["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, vec!["causal-recurrent"]);
}

#[test]
fn verify_output_is_byte_identical_across_runs() {
    let a = mixerlab(&["verify", "--instances", "5", "--seed", "9"]);
    let b = mixerlab(&["verify", "--instances", "5", "--seed", "9"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(mixerlab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mixerlab(&["verify", "--repeats", "0"]).status.code(), Some(2));
    assert_eq!(mixerlab(&["verify", "--inject-fault", "nope"]).status.code(), Some(2));
    assert_eq!(mixerlab(&["model", "--preset", "XL"]).status.code(), Some(2));
    assert_eq!(mixerlab(&["diag", "--format", "csv"]).status.code(), Some(2));
}

#[test]
fn model_report_and_csv() {
    let out = mixerlab(&["model", "--preset", "T"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let params = v["report"]["total_params"].as_u64().unwrap();
    assert!((22_500_000..=27_500_000).contains(&params));
    let csv = mixerlab(&["model", "--preset", "S", "--format", "csv"]);
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("section,name,params,flops"));
}

#[test]
fn config_file_and_out_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"sizes": {"n": [16, 32], "c": 8, "d": 4, "h": 1}, "repeats": 1, "warmup": 0}"#).unwrap();
    let report = dir.path().join("bench.csv");
    let out = mixerlab(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--format",
        "csv",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(report).unwrap();
    assert_eq!(text.lines().count(), 1 + 8);
    assert!(text.starts_with("mixer,n,repeats"));
}

#[test]
fn diag_reports_permutation_probe() {
    let out = mixerlab(&["diag", "--sizes", "24"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert!(v["permutation"]["forget_off_delta"].as_f64().unwrap() < 1e-12);
    assert!(v["permutation"]["forget_on_delta"].as_f64().unwrap() > 1e-6);
}
