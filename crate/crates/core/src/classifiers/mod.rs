//! SVM and random-forest classifiers, hyperparameter grid search, and
//! threshold tuning.
//!
//! SVMs see per-feature z-scored inputs (training statistics); forests see
//! raw features.

pub mod forest;
pub mod grid;
pub mod svm;
pub mod threshold;

use ndarray::{Array1, Array2, Axis};

use crate::data::stratified_folds;
use crate::error::{Error, Result};
use crate::rng;

pub use forest::{rf_fit, ForestModel};
pub use grid::{grid_search, grid_search_k, CellResult, Family, GridResult, GridSpec};
pub use svm::{smo_solve, svm_fit, Kernel, SvmModel};
pub use threshold::tune_threshold;

/// Per-feature z-scoring with training means and population standard
/// deviations. Constant features are centered only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::shape("cannot standardize an empty matrix"));
        }
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let scale = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
        Ok(Standardizer { mean, scale })
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::shape(format!(
                "standardizer expects {} features, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        Ok((x - &self.mean) / &self.scale)
    }
}

/// One point of a hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelSpec {
    Svm { kernel: Kernel, c: f64 },
    Forest { n_trees: usize, max_depth: usize },
}

impl ModelSpec {
    pub fn family(&self) -> Family {
        match self {
            ModelSpec::Svm { .. } => Family::Svm,
            ModelSpec::Forest { .. } => Family::Forest,
        }
    }

    /// Sort key: smaller keys are simpler models and win exact ties.
    pub(crate) fn simplicity(&self) -> (f64, f64, f64) {
        match *self {
            ModelSpec::Svm { kernel: Kernel::Linear, c } => (c, 0.0, 0.0),
            ModelSpec::Svm { kernel: Kernel::Rbf { gamma }, c } => (c, 1.0, gamma),
            ModelSpec::Forest { n_trees, max_depth } => (n_trees as f64, max_depth as f64, 0.0),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ModelSpec::Svm { kernel: Kernel::Linear, c } => format!("svm linear C={c}"),
            ModelSpec::Svm { kernel: Kernel::Rbf { gamma }, c } => {
                format!("svm rbf C={c} gamma={gamma}")
            }
            ModelSpec::Forest { n_trees, max_depth } => {
                format!("rf n_trees={n_trees} max_depth={max_depth}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Svm(SvmModel),
    Forest(ForestModel),
}

/// A fitted model with its input scaling and decision threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub spec: ModelSpec,
    pub scaler: Option<Standardizer>,
    pub model: Model,
}

impl TrainedClassifier {
    pub fn scores(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        match &self.model {
            Model::Svm(m) => {
                let z = self.scaler.as_ref().expect("svm has a scaler").transform(x)?;
                m.decision_function(&z)
            }
            Model::Forest(m) => m.scores(x),
        }
    }

    pub fn threshold(&self) -> f64 {
        match &self.model {
            Model::Svm(m) => m.threshold,
            Model::Forest(m) => m.threshold,
        }
    }

    pub fn set_threshold(&mut self, t: f64) {
        match &mut self.model {
            Model::Svm(m) => m.threshold = t,
            Model::Forest(m) => m.threshold = t,
        }
    }

    /// Scores and labels (`1` iff score > threshold).
    pub fn predict(&self, x: &Array2<f64>) -> Result<(Vec<f64>, Vec<u8>)> {
        let s = self.scores(x)?;
        let t = self.threshold();
        let labels = s.iter().map(|&v| u8::from(v > t)).collect();
        Ok((s, labels))
    }
}

pub(crate) fn to_signed(y: &[u8]) -> Vec<f64> {
    y.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect()
}

/// Fit one grid cell on 0/1 labels, threshold at the family default.
pub fn fit_model(x: &Array2<f64>, y: &[u8], spec: ModelSpec, seed: u64) -> Result<TrainedClassifier> {
    match spec {
        ModelSpec::Svm { kernel, c } => {
            let scaler = Standardizer::fit(x)?;
            let z = scaler.transform(x)?;
            let m = svm_fit(&z, &to_signed(y), kernel, c)?;
            Ok(TrainedClassifier { spec, scaler: Some(scaler), model: Model::Svm(m) })
        }
        ModelSpec::Forest { n_trees, max_depth } => {
            let m = rf_fit(x, y, n_trees, max_depth, seed)?;
            Ok(TrainedClassifier { spec, scaler: None, model: Model::Forest(m) })
        }
    }
}

/// Seed for the forest fitted on fold `fold` of a cross-validation.
pub(crate) fn fold_seed(seed: u64, fold: usize) -> u64 {
    rng::derive(seed, &format!("cv-fold-{fold}"))
}

/// Out-of-fold scores of `spec` under the given fold assignment.
pub fn out_of_fold_scores(
    x: &Array2<f64>,
    y: &[u8],
    spec: ModelSpec,
    folds: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    let k = folds.iter().copied().max().map_or(0, |m| m + 1);
    let mut oof = vec![f64::NAN; y.len()];
    for f in 0..k {
        let (tr, va): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| folds[i] != f);
        let ytr: Vec<u8> = tr.iter().map(|&i| y[i]).collect();
        let m = fit_model(&x.select(Axis(0), &tr), &ytr, spec, fold_seed(seed, f))?;
        let s = m.scores(&x.select(Axis(0), &va))?;
        for (&i, v) in va.iter().zip(s) {
            oof[i] = v;
        }
    }
    Ok(oof)
}

/// Fit on all rows with a threshold tuned on stratified `k`-fold
/// out-of-fold scores.
pub fn fit_tuned(
    x: &Array2<f64>,
    y: &[u8],
    spec: ModelSpec,
    k: usize,
    seed: u64,
) -> Result<TrainedClassifier> {
    if k < 2 {
        return Err(Error::config("threshold tuning needs at least 2 folds"));
    }
    let folds = stratified_folds(y, k, rng::derive(seed, "threshold-folds"));
    let oof = out_of_fold_scores(x, y, spec, &folds, seed)?;
    let t = tune_threshold(&oof, y)?;
    let mut m = fit_model(x, y, spec, seed)?;
    m.set_threshold(t);
    Ok(m)
}
