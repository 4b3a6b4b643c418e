//! Metrics, ROC curves, leave-one-site-out validation, bootstrap confidence
//! intervals and label-permutation tests.

pub mod bootstrap;
pub mod losocv;
pub mod metrics;
pub mod permutation;
pub mod report;

pub use bootstrap::{bootstrap_ci, percentile, BootstrapCI, BootstrapMode};
pub use losocv::{losocv_run, losocv_sites, LosocvReport, MeanMetrics, ModelOutcome};
pub use metrics::{auc, compute_metrics, roc_points, trapezoid, Confusion, Metrics};
pub use permutation::{permutation_p_value, permutation_test, PermutationResult};

use crate::classifiers::ModelSpec;

/// A classifier at fixed hyperparameters, with the fold count used to tune
/// its decision threshold on out-of-fold scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub spec: ModelSpec,
    pub threshold_folds: usize,
    pub seed: u64,
}
