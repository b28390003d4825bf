use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::data::{SyntheticSpec, IMAGE_SIDE};
use crate::loss::{AdaptOn, Estimator};
use crate::nn::ModelConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Where a run's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory from the spec (identical to what `gen-data` writes).
    Synthetic(SyntheticSpec),
    /// A dataset tree on disk.
    Root(PathBuf),
}

impl DataSource {
    pub fn natural_side(&self) -> usize {
        match self {
            DataSource::Synthetic(spec) => spec.side,
            DataSource::Root(_) => IMAGE_SIDE,
        }
    }
}

/// How both domains are divided into train and test halves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// One fully resolved training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub split: SplitSpec,
    /// Directory receiving `metrics.csv` and `run_meta.json`.
    pub output_dir: PathBuf,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Flat run object as written in config files. Every key except `name` is
/// optional; omitted keys take the library defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    name: String,
    conv_filters: Option<Vec<usize>>,
    feature_units: Option<usize>,
    dropout_rate: Option<f64>,
    #[serde(default, deserialize_with = "present")]
    max_norm_cap: Option<Option<f64>>,
    deep_head: Option<bool>,
    image_side: Option<usize>,
    learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    adapt_on: Option<AdaptOn>,
    lambda_max: Option<f64>,
    gamma: Option<f64>,
    estimator: Option<Estimator>,
    kernel_multipliers: Option<Vec<f64>>,
    bandwidth_gradient: Option<bool>,
    train_fraction: Option<f64>,
    split_seed: Option<u64>,
    data: Option<DataSource>,
}

/// Distinguishes an explicit `null` (no cap) from an absent key (default cap).
fn present<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Option<f64>>, D::Error> {
    Option::<f64>::deserialize(d).map(Some)
}

fn prefixed(prefix: &str, err: Error) -> Error {
    match err {
        Error::Config { key, reason } => Error::Config {
            key: format!("{prefix}.{key}"),
            reason,
        },
        other => other,
    }
}

impl RawRun {
    fn resolve(self, out_root: &Path) -> Result<RunSpec> {
        let defaults = TrainConfig::default();
        let data = self.data.unwrap_or(DataSource::Synthetic(SyntheticSpec::default()));
        if let DataSource::Synthetic(spec) = &data {
            spec.validate().map_err(|e| prefixed("data.synthetic", e))?;
        }
        let base = ModelConfig::default();
        let model = ModelConfig {
            conv_filters: self.conv_filters.unwrap_or(base.conv_filters),
            feature_units: self.feature_units.unwrap_or(base.feature_units),
            dropout_rate: self.dropout_rate.unwrap_or(base.dropout_rate),
            head_max_norm: self.max_norm_cap.unwrap_or(base.head_max_norm),
            deep_head: self.deep_head.unwrap_or(base.deep_head),
            input_side: self.image_side.unwrap_or(data.natural_side()),
            ..base
        };
        model.validate()?;
        let seed = self.seed.unwrap_or(defaults.seed);
        let train = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(defaults.learning_rate),
            beta1: self.beta1.unwrap_or(defaults.beta1),
            beta2: self.beta2.unwrap_or(defaults.beta2),
            epsilon: self.epsilon.unwrap_or(defaults.epsilon),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            epochs: self.epochs.unwrap_or(defaults.epochs),
            seed,
            adapt_on: self.adapt_on.unwrap_or(defaults.adapt_on),
            lambda_max: self.lambda_max.unwrap_or(defaults.lambda_max),
            gamma: self.gamma.unwrap_or(defaults.gamma),
            estimator: self.estimator.unwrap_or(defaults.estimator),
            kernel_multipliers: self.kernel_multipliers.unwrap_or(defaults.kernel_multipliers),
            bandwidth_gradient: self.bandwidth_gradient.unwrap_or(defaults.bandwidth_gradient),
        };
        train.validate()?;
        let split = SplitSpec {
            train_fraction: self.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION),
            seed: self.split_seed.unwrap_or(seed),
        };
        if !(split.train_fraction > 0.0 && split.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must lie strictly between 0 and 1"));
        }
        validate_name(&self.name)?;
        Ok(RunSpec {
            output_dir: out_root.join(&self.name),
            name: self.name,
            model,
            train,
            data,
            split,
        })
    }
}

fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && name != "."
        && name != "..";
    if ok {
        Ok(())
    } else {
        Err(Error::config(
            "name",
            format!("`{name}` must be non-empty and use only [A-Za-z0-9_.-]"),
        ))
    }
}

/// Checks that run names are unique; the first repeated name is reported.
pub fn check_unique_names(specs: &[RunSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, spec) in specs.iter().enumerate() {
        if !seen.insert(spec.name.as_str()) {
            return Err(Error::config(
                format!("runs[{i}].name"),
                format!("duplicate run name `{}`", spec.name),
            ));
        }
    }
    Ok(())
}

/// Parses a JSON config document.
///
/// Accepted shapes: a single run object, an array of run objects, or
/// `{"runs": [...]}`. Each run's output directory is `<out_root>/<name>`.
pub fn parse_config_str(text: &str, out_root: &Path) -> Result<Vec<RunSpec>> {
    let doc: Value = serde_json::from_str(text)?;
    let (raw_runs, prefix): (Vec<Value>, Option<&str>) = match doc {
        Value::Array(items) => (items, Some("")),
        Value::Object(mut map) if map.contains_key("runs") => {
            if map.len() != 1 {
                let extra = map.keys().find(|k| *k != "runs").cloned().unwrap_or_default();
                return Err(Error::config(extra, "unknown top-level key next to `runs`"));
            }
            match map.remove("runs") {
                Some(Value::Array(items)) => (items, Some("runs")),
                _ => return Err(Error::config("runs", "must be an array of run objects")),
            }
        }
        single @ Value::Object(_) => (vec![single], None),
        _ => return Err(Error::config("<root>", "expected a run object or a list of runs")),
    };
    if raw_runs.is_empty() {
        return Err(Error::config(prefix.unwrap_or("runs"), "no runs defined"));
    }
    let specs = raw_runs
        .into_iter()
        .enumerate()
        .map(|(i, value)| {
            let at = match prefix {
                None => String::new(),
                Some(p) => format!("{p}[{i}]"),
            };
            let raw: RawRun = serde_json::from_value(value).map_err(|e| {
                Error::config(if at.is_empty() { "<run>".to_string() } else { at.clone() }, e.to_string())
            })?;
            raw.resolve(out_root).map_err(|e| if at.is_empty() { e } else { prefixed(&at, e) })
        })
        .collect::<Result<Vec<_>>>()?;
    check_unique_names(&specs)?;
    Ok(specs)
}

/// Reads and parses a config file; see [`parse_config_str`].
pub fn parse_config(path: &Path, out_root: &Path) -> Result<Vec<RunSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, out_root)
}

/// Filter widths for each row of the published configuration table, in order.
pub const TABLE1_ROWS: [(&str, &[usize], AdaptOn); 6] = [
    ("fitting", &[16, 32], AdaptOn::Off),
    ("mdd_1layer_16", &[16], AdaptOn::Features),
    ("mdd_2layer_16_32", &[16, 32], AdaptOn::Features),
    ("mdd_3layer_16_32_64", &[16, 32, 64], AdaptOn::Features),
    ("mdd_2layer_4_8", &[4, 8], AdaptOn::Features),
    ("mdd_2layer_8_16", &[8, 16], AdaptOn::Features),
];

/// The six-row configuration sweep with default settings, synthetic data and
/// seed 0. Callers adjust seed, epochs and data afterwards.
pub fn builtin_table1_sweep() -> Vec<RunSpec> {
    table1_sweep(&DataSource::Synthetic(SyntheticSpec::default()), 0, TrainConfig::default().epochs, Path::new("."))
}

/// [`builtin_table1_sweep`] with explicit data, seed, epoch count and output root.
pub fn table1_sweep(data: &DataSource, seed: u64, epochs: usize, out_root: &Path) -> Vec<RunSpec> {
    TABLE1_ROWS
        .iter()
        .map(|&(name, filters, adapt_on)| RunSpec {
            name: name.to_string(),
            model: ModelConfig {
                input_side: data.natural_side(),
                ..ModelConfig::with_filters(filters)
            },
            train: TrainConfig {
                seed,
                epochs,
                adapt_on,
                ..TrainConfig::default()
            },
            data: data.clone(),
            split: SplitSpec {
                train_fraction: DEFAULT_TRAIN_FRACTION,
                seed,
            },
            output_dir: out_root.join(name),
        })
        .collect()
}
