use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use apcd_core::harness::{read_results, required_permutations, ExperimentConfig, RESULTS_FILE};
use apcd_core::schema::{read_json, PolicyDocument};

fn apcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apcd")).args(args).output().expect("spawn apcd")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("config.in.json");
    std::fs::write(&p, json).unwrap();
    p
}

fn desk_dataset(dir: &Path, extra: &str) -> PathBuf {
    let cfg = write_config(dir, &format!(r#"{{"benchmark": {{"steps": 101 {extra}}}, "runs": 20}}"#));
    let data = dir.join("data");
    let out = apcd(&["gen", "--config", &s(&cfg), "--out", &s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn vanilla_with_three_sequences_is_a_three_component_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let data = desk_dataset(dir.path(), "");
    let policy = dir.path().join("v.json");
    let out = apcd(&["extract", "--data", &s(&data), "--method", "vanilla", "--n", "3", "--sigma-sq", "1e4", "--out", &s(&policy)]);
    assert!(out.status.success());
    let doc: PolicyDocument = read_json(&policy).unwrap();
    assert_eq!(doc.kind, "mixture");
    assert_eq!(doc.components.len(), 3);
    assert!(policy.with_extension("manifest.json").exists());

    let csv = dir.path().join("eval.csv");
    let out = apcd(&["evaluate", "--data", &s(&data), "--policy", &s(&policy), "--out", &s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(2).unwrap().contains(",vanilla,"));
}

#[test]
fn natural_matches_vanilla_without_process_noise() {
    let dir = tempfile::tempdir().unwrap();
    let data = desk_dataset(dir.path(), r#", "force_noise_scales": [0.0, 0.0]"#);
    let mut docs = Vec::new();
    for method in ["vanilla", "natural"] {
        let p = dir.path().join(format!("{method}.json"));
        let out = apcd(&["extract", "--data", &s(&data), "--method", method, "--n", "1", "--seed", "4", "--out", &s(&p)]);
        assert!(out.status.success());
        docs.push(read_json::<PolicyDocument>(&p).unwrap());
    }
    let v = docs[0].to_mixture().unwrap().components.remove(0);
    let n = docs[1].to_linear().unwrap();
    for (a, b) in v.steps.iter().zip(&n.steps) {
        let scale = a.gain.norm().max(1.0);
        assert!((&a.gain - &b.gain).norm() <= 1e-6 * scale);
        assert!((&a.offset - &b.offset).norm() <= 1e-6 * a.offset.norm().max(1.0));
        assert!((&a.cov - &b.cov).norm() <= 1e-6 * a.cov.norm());
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = desk_dataset(dir.path(), "");
    let out = dir.path().join("p.json");
    for args in [
        vec!["extract", "--data", &s(&data), "--n", "0", "--out", &s(&out)],
        vec!["extract", "--data", &s(&data), "--n", "21", "--out", &s(&out)],
        vec!["extract", "--data", &s(&data), "--n", "1", "--method", "bogus", "--out", &s(&out)],
        vec!["frobnicate"],
    ] {
        let o = apcd(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    let o = apcd(&["extract", "--data", &s(&data), "--n", "1", "--method", "bogus", "--out", &s(&out)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown extraction method 'bogus'"));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\n  \"benchmark\": {\"stepz\": 3}\n}");
    let o = apcd(&["gen", "--config", &s(&cfg), "--out", &s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stepz") && err.contains("line 2"), "{err}");
}

#[test]
fn numerical_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"benchmark": {"steps": 101, "lambda": 1e3}, "runs": 20}"#);
    let o = apcd(&["gen", "--config", &s(&cfg), "--out", &s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("risk-sensitivity breakdown at t="));
}

#[test]
fn oracle_check_passes() {
    let o = apcd(&["oracle-check"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 8);
    assert!(!text.contains("FAIL"));
}

#[test]
fn desk_sweep_row_count_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = apcd(&["--jobs", "2", "sweep", "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = ExperimentConfig::desk();
    let perms: usize = cfg.sweep.n.iter().map(|n| required_permutations(cfg.sweep.pool, *n, cfg.sweep.f_bar)).sum();
    let rows = read_results(&out.join(RESULTS_FILE)).unwrap();
    assert_eq!(rows.len(), cfg.sweep.sigma_sq.len() * perms * 3);
    assert!(out.join("manifest.json").exists());

    let plot = dir.path().join("plot");
    let o = apcd(&["plot-data", "--results", &s(&out.join(RESULTS_FILE)), "--out", &s(&plot)]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(plot.join("summary.csv")).unwrap(),
        std::fs::read(out.join("summary.csv")).unwrap()
    );
}
