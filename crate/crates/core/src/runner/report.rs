use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::train::MetricsRecord;
use crate::{Error, Result};

/// Fixed column order of `report.csv`; a trailing `status` column follows.
pub const REPORT_COLUMNS: [&str; 8] = [
    "name",
    "training_loss",
    "training_accuracy",
    "testing_loss",
    "testing_accuracy",
    "seed",
    "epochs",
    "wall_seconds",
];

pub const STATUS_COLUMN: &str = "status";

/// Column order of each run's `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 8] = [
    "epoch",
    "train_loss",
    "train_accuracy",
    "test_loss",
    "test_accuracy",
    "lambda",
    "mmd_value",
    "wall_seconds",
];

/// One row of `report.csv`: final-epoch metrics of one run.
///
/// Metric fields are empty for runs that did not finish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub training_loss: Option<f64>,
    pub training_accuracy: Option<f64>,
    pub testing_loss: Option<f64>,
    pub testing_accuracy: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub wall_seconds: Option<f64>,
    #[serde(default)]
    pub status: Option<String>,
}

impl ReportRow {
    pub fn completed(name: &str, seed: u64, epochs: usize, last: &MetricsRecord, wall_seconds: f64) -> Self {
        Self {
            name: name.to_string(),
            training_loss: Some(last.train_loss),
            training_accuracy: Some(last.train_accuracy),
            testing_loss: Some(last.test_loss),
            testing_accuracy: Some(last.test_accuracy),
            seed: Some(seed),
            epochs: Some(epochs),
            wall_seconds: Some(wall_seconds),
            status: Some("ok".into()),
        }
    }

    pub fn failed(name: &str, seed: u64, epochs: usize, reason: &str) -> Self {
        Self {
            name: name.to_string(),
            training_loss: None,
            training_accuracy: None,
            testing_loss: None,
            testing_accuracy: None,
            seed: Some(seed),
            epochs: Some(epochs),
            wall_seconds: None,
            status: Some(format!("failed: {reason}")),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status.as_deref().map_or(true, |s| s == "ok")
            && [self.training_loss, self.training_accuracy, self.testing_loss, self.testing_accuracy]
                .iter()
                .all(|v| v.is_some_and(f64::is_finite))
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = REPORT_COLUMNS.to_vec();
    header.push(STATUS_COLUMN);
    w.write_record(&header)?;
    for row in rows {
        w.write_record([
            row.name.clone(),
            fmt_opt(row.training_loss),
            fmt_opt(row.training_accuracy),
            fmt_opt(row.testing_loss),
            fmt_opt(row.testing_accuracy),
            row.seed.map(|v| v.to_string()).unwrap_or_default(),
            row.epochs.map(|v| v.to_string()).unwrap_or_default(),
            fmt_opt(row.wall_seconds),
            row.status.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Reads a report; the first eight columns must match [`REPORT_COLUMNS`]
/// exactly, and only a `status` column may follow them.
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    let schema_ok = names.len() >= REPORT_COLUMNS.len()
        && names[..REPORT_COLUMNS.len()] == REPORT_COLUMNS
        && matches!(names[REPORT_COLUMNS.len()..], [] | [STATUS_COLUMN]);
    if !schema_ok {
        return Err(Error::Data {
            path: path.to_path_buf(),
            reason: format!(
                "report schema mismatch: expected columns {:?} (optionally followed by `{STATUS_COLUMN}`), found {names:?}",
                REPORT_COLUMNS
            ),
        });
    }
    reader
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_metrics_header(w: &mut csv::Writer<std::fs::File>) -> Result<()> {
    w.write_record(METRICS_COLUMNS)?;
    Ok(())
}

pub fn write_metrics_row(w: &mut csv::Writer<std::fs::File>, r: &MetricsRecord) -> Result<()> {
    w.write_record([
        r.epoch.to_string(),
        r.train_loss.to_string(),
        r.train_accuracy.to_string(),
        r.test_loss.to_string(),
        r.test_accuracy.to_string(),
        r.lambda.to_string(),
        r.mmd_value.to_string(),
        r.wall_seconds.to_string(),
    ])?;
    Ok(())
}

/// Per-metric differences between a report row and its reference row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDelta {
    pub name: String,
    /// `(metric, report value, reference value)`; `None` where either side is missing.
    pub metrics: Vec<(&'static str, Option<f64>, Option<f64>)>,
    /// Testing-accuracy gain over the `fitting` row of the same file, report side.
    pub gain_over_fitting: Option<f64>,
    /// The same gain computed within the reference file.
    pub reference_gain_over_fitting: Option<f64>,
}

impl RowDelta {
    pub fn delta(&self, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(m, _, _)| *m == metric)
            .and_then(|(_, a, b)| Some((*a)? - (*b)?))
    }

    /// True for adapted rows that do not beat the baseline on testing accuracy.
    pub fn fails_to_beat_baseline(&self) -> bool {
        self.name != BASELINE_ROW && self.gain_over_fitting.is_some_and(|g| g <= 0.0)
    }
}

/// Name of the unadapted baseline row.
pub const BASELINE_ROW: &str = "fitting";

const COMPARED: [&str; 4] = ["training_loss", "training_accuracy", "testing_loss", "testing_accuracy"];

fn metric(row: &ReportRow, name: &str) -> Option<f64> {
    match name {
        "training_loss" => row.training_loss,
        "training_accuracy" => row.training_accuracy,
        "testing_loss" => row.testing_loss,
        "testing_accuracy" => row.testing_accuracy,
        _ => None,
    }
}

fn baseline_accuracy(rows: &[ReportRow]) -> Option<f64> {
    rows.iter().find(|r| r.name == BASELINE_ROW).and_then(|r| r.testing_accuracy)
}

/// Compares two parsed reports row by row (matched by name, report order).
pub fn compare_rows(report: &[ReportRow], reference: &[ReportRow]) -> Vec<RowDelta> {
    let base = baseline_accuracy(report);
    let ref_base = baseline_accuracy(reference);
    report
        .iter()
        .map(|row| {
            let other = reference.iter().find(|r| r.name == row.name);
            let metrics = COMPARED
                .iter()
                .map(|&m| (m, metric(row, m), other.and_then(|o| metric(o, m))))
                .collect();
            let gain = |acc: Option<f64>, base: Option<f64>| Some(acc? - base?);
            RowDelta {
                name: row.name.clone(),
                metrics,
                gain_over_fitting: gain(row.testing_accuracy, base),
                reference_gain_over_fitting: gain(other.and_then(|o| o.testing_accuracy), ref_base),
            }
        })
        .collect()
}

/// Reads both files and compares them; see [`compare_rows`].
pub fn compare_report(report: &Path, reference: &Path) -> Result<Vec<RowDelta>> {
    Ok(compare_rows(&read_report(report)?, &read_report(reference)?))
}

/// Human-readable table of [`compare_report`] output.
pub fn render_deltas(deltas: &[RowDelta]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:>28} {:>28} {:>28} {:>28} {:>12} {:>12}",
        "name",
        "training_loss (Δ)",
        "training_accuracy (Δ)",
        "testing_loss (Δ)",
        "testing_accuracy (Δ)",
        "vs_fitting",
        "ref_vs_fit"
    );
    let cell = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => format!("{a:.4} / {b:.4} ({:+.4})", a - b),
        (Some(a), None) => format!("{a:.4} / -"),
        (None, Some(b)) => format!("- / {b:.4}"),
        (None, None) => "-".to_string(),
    };
    let signed = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:+.4}"));
    for d in deltas {
        let cells: Vec<String> = d.metrics.iter().map(|(_, a, b)| cell(*a, *b)).collect();
        let flag = if d.fails_to_beat_baseline() { "  <- no gain over fitting" } else { "" };
        let _ = writeln!(
            out,
            "{:<22} {:>28} {:>28} {:>28} {:>28} {:>12} {:>12}{flag}",
            d.name,
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            signed(d.gain_over_fitting),
            signed(d.reference_gain_over_fitting),
        );
    }
    out
}
