use std::path::Path;
use std::process::{Command, Output};

fn sqnkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqnkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn strip_wall_time(text: &str) -> String {
    text.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn run_writes_trace_with_increasing_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = sqnkit(&[
        "run",
        "--synth",
        "200,20,0.5,well",
        "--loss",
        "ridge",
        "--curvature",
        "identity",
        "--max-epochs",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out.join("trace.csv"));
    assert_eq!(
        header,
        ["epoch", "data_passes", "f", "subopt", "grad_norm", "anchor_size", "pairs_accepted", "pairs_skipped", "wall_ms"]
    );
    assert!(rows.len() >= 3);
    let passes: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(passes.windows(2).all(|w| w[1] > w[0]));
    for name in ["trace.json", "theory.json", "reference.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("final suboptimality"));
}

#[test]
fn same_seed_gives_identical_csv() {
    let args = [
        "run",
        "--synth",
        "150,12,0.4,ill",
        "--loss",
        "logistic",
        "--max-epochs",
        "3",
        "--seed",
        "9",
        "--no-reference",
    ];
    let a = sqnkit(&args);
    let b = sqnkit(&args);
    assert!(a.status.success());
    let (ta, tb) = (String::from_utf8(a.stdout).unwrap(), String::from_utf8(b.stdout).unwrap());
    assert_eq!(strip_wall_time(&ta), strip_wall_time(&tb));
    assert!(ta.lines().count() >= 3);
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let o = sqnkit(&["run", "--data", "/definitely/missing/file.svm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/definitely/missing/file.svm"));
}

#[test]
fn invalid_flags_are_usage_errors() {
    assert_eq!(sqnkit(&["run", "--synth", "10,3,0.5,well", "--beta", "0"]).status.code(), Some(2));
    assert_eq!(sqnkit(&["run", "--synth", "10,3"]).status.code(), Some(2));
    assert_eq!(sqnkit(&["run", "--outer", "7", "--synth", "10,3,1,well"]).status.code(), Some(2));
    assert_eq!(sqnkit(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_failure() {
    let o = sqnkit(&[
        "run",
        "--synth",
        "40,5,1,well",
        "--loss",
        "ridge",
        "--curvature",
        "identity",
        "--eta",
        "50",
        "--epsilon",
        "0",
        "--no-reference",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn compare_outer_options_merges_all_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("merged.csv");
    let o = sqnkit(&[
        "compare",
        "--synth",
        "120,10,0.5,well",
        "--vary",
        "outer=1,2,3,4,last",
        "--max-epochs",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["variant", "epoch", "data_passes", "subopt"]);
    let mut names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    names.dedup();
    assert_eq!(names, ["outer=1", "outer=2", "outer=3", "outer=4", "outer=last"]);
    // Each variant runs 3 epochs plus the starting point.
    assert_eq!(rows.len(), 5 * 4);
}

#[test]
fn compare_curvature_modes_row_count_matches_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("merged.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_sqnkit"))
        .args([
            "compare",
            "--synth",
            "100,8,0.6,well",
            "--loss",
            "ridge",
            "--vary",
            "curvature=identity,lbfgs,block",
            "--max-epochs",
            "30",
            "--epsilon",
            "1e-6",
            "--out",
            out.to_str().unwrap(),
        ])
        .env("SQNKIT_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&out);
    let stderr = String::from_utf8_lossy(&o.stderr);
    let epochs: usize = stderr
        .lines()
        .filter_map(|l| l.split(" after ").nth(1))
        .map(|rest| rest.split(' ').next().unwrap().parse::<usize>().unwrap() + 1)
        .sum();
    assert_eq!(rows.len(), epochs);
    let mut names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    names.dedup();
    assert_eq!(names.len(), 3);
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn compare_rejects_mismatched_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    std::fs::write(&a, r#"{"name": "a", "synth": "50,5,1,well", "config": {"eta": 0.01}}"#).unwrap();
    std::fs::write(&b, r#"{"name": "b", "synth": "60,5,1,well", "config": {"eta": 0.02}}"#).unwrap();
    let o = sqnkit(&["compare", "--spec", a.to_str().unwrap(), "--spec", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different dataset"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"max_epochs": 2, "eta": 0.05}"#).unwrap();
    let out = dir.path().join("o");
    let o = sqnkit(&[
        "run",
        "--synth",
        "80,6,1,well",
        "--config",
        cfg.to_str().unwrap(),
        "--eta",
        "0.02",
        "--epsilon",
        "0",
        "--no-reference",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["config"]["eta"], 0.02);
    assert_eq!(trace["config"]["max_epochs"], 2);
    assert_eq!(trace["records"].as_array().unwrap().len(), 3);
}

#[test]
fn synth_then_run_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.svm");
    let o = sqnkit(&["synth", "--synth", "60,7,0.5,well", "--loss", "logistic", "--out", data.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 60);
    let refp = dir.path().join("ref.json");
    let o = sqnkit(&["reference", "--data", data.to_str().unwrap(), "--out", refp.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = sqnkit(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--reference",
        refp.to_str().unwrap(),
        "--max-epochs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn check_passes_and_bypass_fails_spectra() {
    let o = sqnkit(&["check", "--level", "fast"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("all 11 checks passed"));
    let o = sqnkit(&["check", "--bypass-curvature-guard"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout.lines().any(|l| l.starts_with("FAIL") && l.contains("spectra")), "{stdout}");
    assert!(stdout.contains("failed: spectra"));
}
