//! Small-CNN domain adaptation with a kernel maximum-mean-discrepancy
//! regularizer, built on a from-scratch reverse-mode autodiff tape.
//!
//! * [`tensor`] — tensors, the autodiff [`tensor::Graph`], gradient checking
//! * [`nn`] — encoder / task-head model built from a [`nn::ModelConfig`]
//! * [`loss`] — cross-entropy, RBF kernels, MMD² estimators, the λ schedule
//! * [`train`] — Adam, epoch loop, evaluation, [`train::fit`]
//! * [`data`] — image loading, dataset layout, splits, batches, synthetic domains
//! * [`runner`] — run configuration, sweeps and CSV reports
//! * [`selftest`] — finite-difference and reference-implementation checks

pub mod data;
mod error;
pub mod loss;
pub mod nn;
pub mod runner;
mod seeding;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
