//! Run configuration, experiment orchestration and CSV/JSON reporting.
//!
//! Each run writes `<out>/<name>/metrics.csv` and `<out>/<name>/run_meta.json`;
//! a sweep also writes `<out>/report.csv` with one row per run, in spec order.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::data::{scan_dataset, split_indices, Domain, LoadedDataset};
use crate::nn::build_model;
use crate::train::{fit_with, FitData, MetricsRecord};
use crate::{Error, Result};

pub use config::{
    builtin_table1_sweep, check_unique_names, parse_config, parse_config_str, table1_sweep, DataSource, RunSpec,
    SplitSpec, DEFAULT_TRAIN_FRACTION, TABLE1_ROWS,
};
pub use report::{
    compare_report, compare_rows, read_report, render_deltas, write_report, ReportRow, RowDelta, BASELINE_ROW,
    METRICS_COLUMNS, REPORT_COLUMNS, STATUS_COLUMN,
};

/// What the "training" and "testing" metric columns are measured on.
pub const EVALUATION_PROTOCOL: &str =
    "training_* = labeled source-domain train split; testing_* = labeled target-domain test split; \
     target-domain labels are used only for testing";

/// Options for [`run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Runs executed concurrently; each run stays single-threaded.
    pub parallel: usize,
    /// Record measured wall-clock seconds. Off by default so that reruns
    /// produce byte-identical files; timing columns are then written as 0.
    pub record_timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            parallel: 1,
            record_timing: false,
        }
    }
}

/// Result of a sweep: the report rows, in spec order, and where they were written.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<ReportRow>,
    pub report_path: PathBuf,
}

impl SweepOutcome {
    /// True when every run finished with finite final metrics.
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(ReportRow::is_ok)
    }
}

/// Train/test data for one run.
pub struct PreparedData {
    pub source_train: LoadedDataset,
    pub target_train: LoadedDataset,
    pub target_test: LoadedDataset,
    pub source_counts: (usize, usize),
    pub target_counts: (usize, usize),
}

fn load_domains(source: &DataSource, side: usize) -> Result<(LoadedDataset, LoadedDataset)> {
    match source {
        DataSource::Synthetic(spec) => {
            let resize = |d: LoadedDataset| if spec.side == side { Ok(d) } else { d.resized(side) };
            Ok((resize(spec.dataset(Domain::Source)?)?, resize(spec.dataset(Domain::Target)?)?))
        }
        DataSource::Root(root) => {
            let (s, t) = scan_dataset(root)?;
            Ok((LoadedDataset::load(&s, side)?, LoadedDataset::load(&t, side)?))
        }
    }
}

/// Loads both domains and applies the stratified split to each.
///
/// Source test images are not used; the source train split feeds both the
/// gradient steps and the "training" metrics.
pub fn prepare_data(spec: &RunSpec) -> Result<PreparedData> {
    let (source, target) = load_domains(&spec.data, spec.model.input_side)?;
    let (s_train, s_test) = split_indices(source.labels(), spec.split.train_fraction, spec.split.seed)?;
    let (t_train, t_test) = split_indices(target.labels(), spec.split.train_fraction, spec.split.seed)?;
    Ok(PreparedData {
        source_train: source.subset(&s_train)?,
        target_train: target.subset(&t_train)?,
        target_test: target.subset(&t_test)?,
        source_counts: (s_train.len(), s_test.len()),
        target_counts: (t_train.len(), t_test.len()),
    })
}

fn write_meta(spec: &RunSpec, data: &PreparedData, status: &str) -> Result<()> {
    let meta = json!({
        "name": spec.name,
        "seed": spec.train.seed,
        "model": spec.model,
        "train": spec.train,
        "data": spec.data,
        "split": {
            "train_fraction": spec.split.train_fraction,
            "seed": spec.split.seed,
            "stratified": true,
            "source": {"train": data.source_counts.0, "test": data.source_counts.1},
            "target": {"train": data.target_counts.0, "test": data.target_counts.1},
        },
        "evaluation": EVALUATION_PROTOCOL,
        "baseline_definition": "adapt_on = off trains on the source train split only; evaluated like every other run",
        "status": status,
    });
    let path = spec.output_dir.join("run_meta.json");
    let text = serde_json::to_string_pretty(&meta)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Executes one run: prepare data, build the model, fit, and stream
/// per-epoch rows into `metrics.csv`. Returns the recorded epochs.
pub fn run_one(spec: &RunSpec, record_timing: bool) -> Result<Vec<MetricsRecord>> {
    let dir = &spec.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = prepare_data(spec)?;
    write_meta(spec, &data, "running")?;

    let metrics_path = dir.join("metrics.csv");
    let mut writer = csv::Writer::from_path(&metrics_path)?;
    report::write_metrics_header(&mut writer)?;
    let mut write_error = None;
    let mut model = build_model(&spec.model, spec.train.seed)?;
    let fitted = fit_with(
        &mut model,
        FitData {
            source_train: &data.source_train,
            source_eval: &data.source_train,
            target_train: &data.target_train,
            target_test: &data.target_test,
        },
        &spec.train,
        |record, _| {
            let mut record = *record;
            if !record_timing {
                record.wall_seconds = 0.0;
            }
            let written = report::write_metrics_row(&mut writer, &record)
                .and_then(|()| writer.flush().map_err(|e| Error::io(&metrics_path, e)));
            if let Err(e) = written {
                write_error.get_or_insert(e);
            }
        },
    );
    let outcome = match (fitted, write_error) {
        (Err(e), _) | (Ok(_), Some(e)) => Err(e),
        (Ok(records), None) => Ok(records),
    };
    let status = match &outcome {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    write_meta(spec, &data, &status)?;
    outcome
}

fn run_row(spec: &RunSpec, record_timing: bool) -> ReportRow {
    let started = Instant::now();
    let (seed, epochs) = (spec.train.seed, spec.train.epochs);
    match run_one(spec, record_timing) {
        Ok(records) => match records.last() {
            Some(last) if last.is_finite() => {
                let wall = if record_timing { started.elapsed().as_secs_f64() } else { 0.0 };
                ReportRow::completed(&spec.name, seed, epochs, last, wall)
            }
            _ => ReportRow::failed(&spec.name, seed, epochs, "no finite final metrics"),
        },
        Err(e) => ReportRow::failed(&spec.name, seed, epochs, &e.to_string()),
    }
}

/// Runs every spec and writes `<out_root>/report.csv`.
///
/// Individual run failures are recorded in the report's `status` column
/// rather than returned; check [`SweepOutcome::all_ok`].
pub fn run(specs: &[RunSpec], out_root: &Path, options: RunOptions) -> Result<SweepOutcome> {
    check_unique_names(specs)?;
    if options.parallel == 0 {
        return Err(Error::config("parallel", "must be >= 1"));
    }
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let rows: Vec<ReportRow> = if options.parallel == 1 || specs.len() < 2 {
        specs.iter().map(|s| run_row(s, options.record_timing)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallel)
            .build()
            .map_err(|e| Error::config("parallel", e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            specs.par_iter().map(|s| run_row(s, options.record_timing)).collect()
        })
    };
    let report_path = out_root.join("report.csv");
    write_report(&report_path, &rows)?;
    Ok(SweepOutcome { rows, report_path })
}
