use std::path::Path;
use std::process::{Command, Output};

fn jif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jif")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "dataset": {"synthetic": {"classes": 4, "samples_per_class": 25, "imbalance": 0.0, "height": 8, "width": 8}},
  "methods": [{"structure": "image"}, {"structure": "jf", "fusion": "cat"}],
  "model": {"conv_channels": [4], "d_img": 6, "meta_hidden": [], "d_meta": 6, "heads": 3},
  "train": {"epochs": 3, "patience": 2},
  "folds": 5,
  "save_checkpoints": false
}"#;

#[test]
fn generate_writes_layout_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = jif(&["generate", "--out", p(out), "--seed", "7", "--set", "samples_per_class=10"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(a.join("schema.json").is_file());
    let meta = std::fs::read_to_string(a.join("meta.csv")).unwrap();
    let images = std::fs::read_dir(a.join("images")).unwrap().count();
    assert_eq!(images, meta.lines().count() - 1);
    assert_eq!(std::fs::read(a.join("meta.csv")).unwrap(), std::fs::read(b.join("meta.csv")).unwrap());
}

#[test]
fn invalid_spec_exits_2_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = jif(&["generate", "--out", p(dir.path()), "--set", "classes=1"]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
}

#[test]
fn usage_error_exits_2() {
    assert_eq!(code(&jif(&["run"])), 2);
    assert_eq!(code(&jif(&["frobnicate"])), 2);
}

#[test]
fn run_is_deterministic_and_emits_one_row_per_fold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let mut csvs = Vec::new();
    for (name, jobs) in [("one", "1"), ("two", "2")] {
        let out = dir.path().join(name);
        let o = jif(&["run", "--config", p(&cfg), "--out", p(&out), "--jobs", jobs]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("manifest.json").is_file());
        csvs.push(std::fs::read(out.join("results.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs.remove(0)).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("Image,")).count(), 5);
    assert_eq!(text.lines().filter(|l| l.starts_with("JF-CAT,")).count(), 5);
}

#[test]
fn missing_dataset_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"dataset": {"directory": {"path": "/nonexistent/data"}}}"#).unwrap();
    assert_eq!(code(&jif(&["run", "--config", p(&cfg)])), 2);
}

fn write_results(path: &Path, rows: &[(&str, String, f64)]) {
    let mut s = String::from("method,run,bac,acc,auc\n");
    for (m, r, v) in rows {
        s.push_str(&format!("{m},{r},{v},{v},{v}\n"));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn compare_identical_methods_reports_p_one() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("results.csv");
    let rows: Vec<_> = (0..6)
        .flat_map(|i| {
            let v = 0.5 + 0.05 * i as f64;
            [("A", format!("s0-f{i}"), v), ("B", format!("s0-f{i}"), v)]
        })
        .collect();
    write_results(&csv, &rows);
    let o = jif(&["compare", p(&csv), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("comparison.json")).unwrap()).unwrap();
    assert_eq!(report["friedman"]["p"], 1.0);
    assert!(report["pairwise"].is_null());
    assert!(dir.path().join("comparison.md").is_file());
}

#[test]
fn compare_flags_dominated_method() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("results.csv");
    let rows: Vec<_> = (0..10)
        .flat_map(|i| {
            let base = 0.4 + 0.03 * i as f64;
            [("Strong", format!("s{i}-f0"), base + 0.1 + 0.001 * i as f64), ("Weak", format!("s{i}-f0"), base)]
        })
        .collect();
    write_results(&csv, &rows);
    let o = jif(&["compare", p(&csv), "--out", p(dir.path()), "--exact"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("comparison.json")).unwrap()).unwrap();
    let pair = &report["pairwise"][0];
    // all ten signs agree: two-sided exact p is 2 / 2^10
    assert_eq!(pair["p"].as_f64().unwrap(), 2.0 / 1024.0);
    assert_eq!(pair["significant"], true);
    let md = String::from_utf8(o.stdout).unwrap();
    assert!(md.contains("| Strong vs Weak | 0.001953 |"), "{md}");
}

#[test]
fn malformed_csv_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "method,run,bac\nA,r0,0.5\nA,r1\n").unwrap();
    assert_eq!(code(&jif(&["compare", p(&csv), "--out", p(dir.path())])), 2);
    let ragged = dir.path().join("ragged.csv");
    write_results(&ragged, &[("A", "r0".into(), 0.5), ("A", "r1".into(), 0.6), ("B", "r0".into(), 0.4)]);
    assert_eq!(code(&jif(&["compare", p(&ragged), "--out", p(dir.path())])), 2);
}

#[test]
fn gradcheck_lists_every_block_once() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("grad.json");
    let o = jif(&["gradcheck", "--out", p(&json)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let mut names: Vec<&str> = report.iter().map(|r| r["block"].as_str().unwrap()).collect();
    assert_eq!(names.len(), 11);
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), 11);
    assert!(report.iter().all(|r| r["max_rel_error"].as_f64().unwrap() < 1e-4));
}

#[test]
fn corrupted_backward_exits_nonzero() {
    let o = jif(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
