use std::path::Path;

use cmda_core::data::SyntheticSpec;
use cmda_core::runner::{
    parse_config_str, read_report, run, table1_sweep, DataSource, RunOptions, REPORT_COLUMNS, STATUS_COLUMN,
};

/// Side 24 is the smallest that keeps the three-layer configuration valid.
fn tiny_data() -> DataSource {
    DataSource::Synthetic(SyntheticSpec {
        samples_per_class: 5,
        side: 24,
        ..SyntheticSpec::default()
    })
}

const TINY_CONFIG: &str = r#"{"runs": [
    {"name": "base", "conv_filters": [4, 8], "adapt_on": "off", "epochs": 2, "batch_size": 4,
     "data": {"synthetic": {"samples_per_class": 5, "side": 16}}},
    {"name": "adapted", "conv_filters": [4], "epochs": 2, "batch_size": 4, "seed": 3,
     "data": {"synthetic": {"samples_per_class": 5, "side": 16}}}
]}"#;

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn run_writes_report_metrics_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let specs = parse_config_str(TINY_CONFIG, dir.path()).unwrap();
    let outcome = run(&specs, dir.path(), RunOptions::default()).unwrap();
    assert!(outcome.all_ok(), "{:?}", outcome.rows);

    let rows = read_report(&outcome.report_path).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["base", "adapted"]);
    assert_eq!(rows[1].seed, Some(3));

    let text = String::from_utf8(read(&outcome.report_path)).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[..8], REPORT_COLUMNS);
    assert_eq!(header[8], STATUS_COLUMN);

    for name in names {
        let metrics = String::from_utf8(read(&dir.path().join(name).join("metrics.csv"))).unwrap();
        assert_eq!(metrics.lines().count(), 3, "{metrics}");
        let meta: serde_json::Value = serde_json::from_slice(&read(&dir.path().join(name).join("run_meta.json"))).unwrap();
        assert_eq!(meta["status"], "ok");
        assert_eq!(meta["split"]["source"]["train"], 8);
        assert_eq!(meta["split"]["target"]["test"], 2);
        assert!(meta["evaluation"].as_str().unwrap().contains("target"));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let specs = table1_sweep(&tiny_data(), 4, 2, dir.path());
        assert!(run(&specs, dir.path(), RunOptions::default()).unwrap().all_ok());
    }
    assert_eq!(read(&a.path().join("report.csv")), read(&b.path().join("report.csv")));
    for spec in table1_sweep(&tiny_data(), 4, 2, a.path()) {
        let rel = Path::new(&spec.name).join("metrics.csv");
        assert_eq!(read(&a.path().join(&rel)), read(&b.path().join(&rel)), "{}", spec.name);
    }
}

#[test]
fn parallel_runs_match_sequential_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let seq = parse_config_str(TINY_CONFIG, a.path()).unwrap();
    let par = parse_config_str(TINY_CONFIG, b.path()).unwrap();
    run(&seq, a.path(), RunOptions::default()).unwrap();
    run(&par, b.path(), RunOptions { parallel: 2, ..RunOptions::default() }).unwrap();
    assert_eq!(read(&a.path().join("report.csv")), read(&b.path().join("report.csv")));
}

#[test]
fn failed_runs_are_flagged_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"[
        {"name": "missing", "conv_filters": [4], "epochs": 1, "image_side": 16, "data": {"root": "/nonexistent/cmda"}},
        {"name": "fine", "conv_filters": [4], "epochs": 1, "data": {"synthetic": {"samples_per_class": 5, "side": 16}}}
    ]"#;
    let specs = parse_config_str(config, dir.path()).unwrap();
    let outcome = run(&specs, dir.path(), RunOptions::default()).unwrap();
    assert!(!outcome.all_ok());
    let rows = read_report(&outcome.report_path).unwrap();
    assert!(rows[0].status.as_deref().unwrap().starts_with("failed"));
    assert_eq!(rows[0].testing_accuracy, None);
    assert_eq!(rows[1].status.as_deref(), Some("ok"));
}

#[test]
fn timing_is_recorded_only_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let specs = parse_config_str(TINY_CONFIG, dir.path()).unwrap();
    let outcome = run(&specs, dir.path(), RunOptions { record_timing: true, ..RunOptions::default() }).unwrap();
    assert!(outcome.rows.iter().all(|r| r.wall_seconds.unwrap() > 0.0));
    let quiet = run(&specs, dir.path(), RunOptions::default()).unwrap();
    assert!(quiet.rows.iter().all(|r| r.wall_seconds == Some(0.0)));
}
