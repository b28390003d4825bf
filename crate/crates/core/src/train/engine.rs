use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use crate::data::{Batch, LoadedDataset};
use crate::loss::{
    categorical_cross_entropy, combined_loss, AdaptOn, Adaptation, Estimator, KernelSpec,
    LambdaSchedule, LossReport, DEFAULT_MULTIPLIERS,
};
use crate::nn::{Mode, Model};
use crate::seeding::{stream_rng, Purpose};
use crate::tensor::{Graph, TensorError};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adapt_on: AdaptOn,
    pub lambda_max: f64,
    pub gamma: f64,
    pub estimator: Estimator,
    /// Median-heuristic bandwidth multipliers for the RBF mixture.
    pub kernel_multipliers: Vec<f64>,
    /// Differentiate through the median-heuristic bandwidth. Without it the
    /// network can shrink MMD by shrinking every feature toward zero.
    pub bandwidth_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            adapt_on: AdaptOn::Features,
            lambda_max: 1.0,
            gamma: 10.0,
            estimator: Estimator::Biased,
            kernel_multipliers: DEFAULT_MULTIPLIERS.to_vec(),
            bandwidth_gradient: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        for (key, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::config("lambda_max", "must be >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be positive"));
        }
        self.kernel().validate().map_err(|_| {
            Error::config("kernel_multipliers", "needs at least one positive value")
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn kernel(&self) -> KernelSpec {
        KernelSpec::median_heuristic(&self.kernel_multipliers).with_bandwidth_gradient(self.bandwidth_gradient)
    }

    pub fn adaptation(&self) -> Adaptation {
        Adaptation {
            adapt_on: self.adapt_on,
            kernel: self.kernel(),
            estimator: self.estimator,
        }
    }

    pub fn schedule(&self) -> LambdaSchedule {
        LambdaSchedule::new(self.lambda_max, self.gamma)
    }
}

/// One row of per-epoch measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub lambda: f64,
    pub mmd_value: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.train_loss,
            self.train_accuracy,
            self.test_loss,
            self.test_accuracy,
            self.lambda,
            self.mmd_value,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Data consumed by [`fit`].
#[derive(Debug, Clone, Copy)]
pub struct FitData<'a> {
    /// Labeled source images used for gradient steps.
    pub source_train: &'a LoadedDataset,
    /// Labeled source images behind the "training" metrics.
    pub source_eval: &'a LoadedDataset,
    /// Target images used by the discrepancy term; labels are never read.
    pub target_train: &'a LoadedDataset,
    /// Labeled target images behind the "testing" metrics.
    pub target_test: &'a LoadedDataset,
}

fn batch_failure(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op, pass }) => Error::NonFiniteLoss {
            epoch,
            batch,
            detail: format!("{op} produced a non-finite value during {pass}"),
        },
        other => other,
    }
}

/// One pass over the source stream, pairing each source batch with a target
/// batch (the target stream cycles when shorter).
///
/// Each step: forward both domains in train mode, combined loss, backward,
/// Adam, max-norm projection. Returns batch-size-weighted epoch means.
pub fn train_epoch(
    model: &mut Model,
    optimizer: &mut AdamState,
    source: &LoadedDataset,
    target: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    lambda: f64,
    epoch: usize,
) -> Result<LossReport> {
    let adaptation = cfg.adaptation();
    let adapting = adaptation.adapt_on != AdaptOn::Off;
    let target_batches: Vec<Batch> = match (adapting, target) {
        (false, _) => Vec::new(),
        (true, Some(t)) if !t.is_empty() => t.batches(cfg.batch_size, !cfg.seed, epoch, false)?.collect::<Result<_>>()?,
        (true, _) => {
            return Err(Error::InvalidArgument {
                op: "train_epoch",
                reason: "adaptation needs a non-empty target stream".into(),
            })
        }
    };
    if source.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train_epoch",
            reason: "empty source stream".into(),
        });
    }
    let mut source_rng = stream_rng(cfg.seed, Purpose::SourceDropout, epoch as u64);
    let mut target_rng = stream_rng(cfg.seed, Purpose::TargetDropout, epoch as u64);
    let adam = cfg.adam();

    let mut sums = LossReport::default();
    let mut seen = 0usize;
    for (index, batch) in source.batches(cfg.batch_size, cfg.seed, epoch, true)?.enumerate() {
        let batch = batch?;
        let labels = batch.labels.as_ref().expect("source batches carry labels");
        let fail = batch_failure(epoch, index);

        let mut g = Graph::new();
        let params = model.bind(&mut g);
        let xs = g.constant(batch.images.clone());
        let src = model
            .forward(&mut g, &params, xs, Mode::Train, &mut source_rng)
            .map_err(&fail)?;
        let tgt = if adapting {
            let tb = &target_batches[index % target_batches.len()];
            let xt = g.constant(tb.images.clone());
            Some(
                model
                    .forward(&mut g, &params, xt, Mode::Train, &mut target_rng)
                    .map_err(&fail)?,
            )
        } else {
            None
        };
        let (loss, report) = combined_loss(&mut g, src, labels, tgt, &adaptation, lambda).map_err(&fail)?;
        if !report.total.is_finite() {
            return Err(fail(Error::Tensor(TensorError::NonFinite {
                op: "combined_loss",
                pass: "forward",
            })));
        }
        g.backward(loss).map_err(|e| fail(e.into()))?;
        let grads: Vec<Vec<f64>> = params
            .iter()
            .zip(model.parameters())
            .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec))
            .collect();
        adam_step(model.parameters_mut(), &grads, optimizer, &adam)?;
        model.apply_constraints()?;

        let n = batch.len() as f64;
        sums.ce_loss += report.ce_loss * n;
        sums.mmd_value += report.mmd_value * n;
        sums.total += report.total * n;
        seen += batch.len();
    }
    let n = seen as f64;
    Ok(LossReport {
        ce_loss: sums.ce_loss / n,
        mmd_value: sums.mmd_value / n,
        lambda,
        total: sums.total / n,
    })
}

/// Mean cross-entropy and argmax accuracy in eval mode.
///
/// Ties in the argmax go to the lower class index.
pub fn evaluate(model: &Model, data: &LoadedDataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument {
            op: "evaluate",
            reason: "empty evaluation stream".into(),
        });
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for batch in data.sequential_batches(batch_size, true)? {
        let batch = batch?;
        let labels = batch.labels.as_ref().expect("requested labels");
        let (_, probs) = model.predict(&batch.images)?;
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let ce = categorical_cross_entropy(&mut g, p, labels)?;
        loss_sum += g.value(ce).data()[0] * batch.len() as f64;
        correct += count_correct(probs.data(), labels.data(), probs.shape()[1]);
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Rows whose first maximal probability sits on the one-hot class.
pub fn count_correct(probs: &[f64], one_hot: &[f64], classes: usize) -> usize {
    probs
        .chunks_exact(classes)
        .zip(one_hot.chunks_exact(classes))
        .filter(|(p, y)| argmax(p) == argmax(y))
        .count()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Batch size used for evaluation passes; results do not depend on it.
const EVAL_BATCH: usize = 64;

/// Trains for `cfg.epochs` epochs, recording metrics after each one.
///
/// Per epoch: set λ from the schedule, run [`train_epoch`], then evaluate on
/// the source eval split ("training" metrics) and the target test split
/// ("testing" metrics).
pub fn fit(model: &mut Model, data: FitData<'_>, cfg: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    fit_with(model, data, cfg, |_, _| {})
}

/// [`fit`] with a hook called after every epoch.
pub fn fit_with<F>(model: &mut Model, data: FitData<'_>, cfg: &TrainConfig, mut on_epoch: F) -> Result<Vec<MetricsRecord>>
where
    F: FnMut(&MetricsRecord, &Model),
{
    cfg.validate()?;
    let mut optimizer = AdamState::new(model.parameters());
    let mut schedule = cfg.schedule();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lambda = schedule.update_lambda(epoch, cfg.epochs)?;
        let report = train_epoch(
            model,
            &mut optimizer,
            data.source_train,
            Some(data.target_train),
            cfg,
            lambda,
            epoch,
        )?;
        let (train_loss, train_accuracy) = evaluate(model, data.source_eval, EVAL_BATCH)?;
        let (test_loss, test_accuracy) = evaluate(model, data.target_test, EVAL_BATCH)?;
        let record = MetricsRecord {
            epoch,
            train_loss,
            train_accuracy,
            test_loss,
            test_accuracy,
            lambda,
            mmd_value: report.mmd_value,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record, model);
        records.push(record);
    }
    Ok(records)
}
