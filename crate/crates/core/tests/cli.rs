use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use merge_cpe::report::{parse_metrics_csv, Manifest};
use merge_cpe::runner::{EpisodeResult, MetricsRow};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_merge-cpe")).args(args).output().expect("binary runs")
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["sweep", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let target = blocker.join("out");
    let out = run(&["sweep", "--rho", "0", "--episodes", "1", "--out", target.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn empty_sweep_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["sweep", "--rho", "", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(dir.path());
    assert!(m.files.is_empty());
    assert_eq!(m.command, "sweep");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn influence_csv_has_one_more_row_than_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["influence", "--seed", "3", "--k", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("influence.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + 3);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 + 1);
    for r in &rows {
        assert_eq!(r.len(), header.len());
        for v in &r[1..] {
            assert!(v.parse::<f64>().unwrap() >= 0.0);
        }
    }
    assert_eq!(manifest(dir.path()).files, ["influence.csv", "report.json"]);
}

#[test]
fn episodes_reaggregate_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep", "--rho", "0,0.5,1", "--episodes", "12", "--policy", "risky", "--seed", "9", "--episodes-out", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv_text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), csv_text);
    let rows = parse_metrics_csv(&csv_text).unwrap();
    let episodes: Vec<EpisodeResult> = fs::read_to_string(dir.path().join("episodes.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(episodes.len(), 36);
    for (r, chunk) in rows.iter().zip(episodes.chunks(12)) {
        let again = MetricsRow::aggregate(r.rho_max, chunk);
        assert_eq!(again.success_rate, r.success_rate);
        assert_eq!(again.collision_rate, r.collision_rate);
        assert_eq!(again.execution_rate, r.execution_rate);
        assert_eq!(again.episodes, r.episodes);
    }
    let m = manifest(dir.path());
    assert_eq!(m.seed, 9);
    assert_eq!(m.files, ["metrics.csv", "metrics.json", "episodes.jsonl"]);
}

#[test]
fn validate_passes_on_defaults() {
    let out = run(&["validate", "--worlds", "8", "--policy", "risky"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn config_hash_follows_config_not_execution_flags() {
    let dir = tempfile::tempdir().unwrap();
    let hash_of = |extra: &[&str], name: &str| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["episode", "--out", out_dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = run(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        manifest(&out_dir).config_hash
    };
    let mut hashes = BTreeMap::new();
    hashes.insert("base", hash_of(&[], "a"));
    hashes.insert("jobs", hash_of(&["--jobs", "2"], "b"));
    hashes.insert("horizon", hash_of(&["--horizon", "0.6"], "c"));
    hashes.insert("seed", hash_of(&["--seed", "4"], "d"));
    assert_eq!(hashes["base"], hashes["jobs"]);
    assert_ne!(hashes["base"], hashes["horizon"]);
    assert_ne!(hashes["base"], hashes["seed"]);
    assert_eq!(hashes["base"].len(), 64);
}

#[test]
fn config_file_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"Cpe": {"RhoMax": [0.0, 1.0], "PoolAccelerations": [-2.0, 2.0]}, "Episodes": 2}"#).unwrap();
    let out = run(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = parse_metrics_csv(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.episodes == 2));

    fs::write(&cfg, "{\n  \"Cpe\": [\n}").unwrap();
    let bad = run(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}
