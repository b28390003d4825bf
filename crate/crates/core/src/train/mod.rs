//! Adam optimization, the paired-domain epoch loop, evaluation and [`fit`].

mod adam;
mod engine;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use engine::{
    count_correct, evaluate, fit, fit_with, train_epoch, FitData, MetricsRecord, TrainConfig,
};
