//! Percentile bootstrap confidence intervals for test-set metrics.

use ndarray::{Array2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::classifiers::{fit_model, fit_tuned, tune_threshold};
use crate::error::{Error, Result};
use crate::rng;

use super::metrics::{compute_metrics, Metrics, METRIC_NAMES};
use super::ClassifierConfig;

const MAX_REDRAWS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapMode {
    /// Resample the training set, refit, retune the threshold on the
    /// out-of-bag rows, evaluate on the fixed test set.
    Refit,
    /// Fit once, then resample the test set.
    TestResample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapCI {
    pub metric: &'static str,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub replicates: usize,
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Draws `n_c` rows with replacement within each class.
fn stratified_resample<R: Rng>(y: &[u8], rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(y.len());
    for class in [0u8, 1] {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        for _ in 0..idx.len() {
            out.push(idx[rng.random_range(0..idx.len())]);
        }
    }
    out.sort_unstable();
    out
}

/// Bootstrap CIs (2.5th/97.5th percentiles) for sensitivity, specificity,
/// accuracy and AUC. Point estimates come from one fit on the full training
/// set with an out-of-fold tuned threshold.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_ci(
    train_x: &Array2<f64>,
    train_y: &[u8],
    test_x: &Array2<f64>,
    test_y: &[u8],
    cfg: &ClassifierConfig,
    b: usize,
    seed: u64,
    mode: BootstrapMode,
) -> Result<Vec<BootstrapCI>> {
    if b < 100 {
        return Err(Error::config(format!("bootstrap needs at least 100 replicates, got {b}")));
    }
    let full = fit_tuned(train_x, train_y, cfg.spec, cfg.threshold_folds, cfg.seed)?;
    let (s, _) = full.predict(test_x)?;
    let point = compute_metrics(&s, test_y, full.threshold())?;

    let reps: Vec<Metrics> = (0..b)
        .into_par_iter()
        .map(|r| match mode {
            BootstrapMode::Refit => refit_replicate(train_x, train_y, test_x, test_y, cfg, seed, r as u64),
            BootstrapMode::TestResample => {
                let mut g = rng::stream(seed, r as u64);
                let idx = stratified_resample(test_y, &mut g);
                let ys: Vec<u8> = idx.iter().map(|&i| test_y[i]).collect();
                let ss: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
                compute_metrics(&ss, &ys, full.threshold())
            }
        })
        .collect::<Result<_>>()?;

    Ok(METRIC_NAMES
        .iter()
        .map(|&name| {
            let vals: Vec<f64> = reps.iter().map(|m| m.get(name).expect("known metric")).collect();
            BootstrapCI {
                metric: name,
                point: point.get(name).expect("known metric"),
                lower: percentile(&vals, 0.025),
                upper: percentile(&vals, 0.975),
                replicates: b,
            }
        })
        .collect())
}

fn refit_replicate(
    train_x: &Array2<f64>,
    train_y: &[u8],
    test_x: &Array2<f64>,
    test_y: &[u8],
    cfg: &ClassifierConfig,
    seed: u64,
    r: u64,
) -> Result<Metrics> {
    let mut last_err = None;
    for attempt in 0..MAX_REDRAWS {
        let mut g = rng::stream(rng::derive(seed, &format!("bootstrap-{attempt}")), r);
        let idx = stratified_resample(train_y, &mut g);
        let mut in_bag = vec![false; train_y.len()];
        for &i in &idx {
            in_bag[i] = true;
        }
        let oob: Vec<usize> = (0..train_y.len()).filter(|&i| !in_bag[i]).collect();
        let oob_y: Vec<u8> = oob.iter().map(|&i| train_y[i]).collect();
        if !oob_y.contains(&0) || !oob_y.contains(&1) {
            continue;
        }
        let bag_y: Vec<u8> = idx.iter().map(|&i| train_y[i]).collect();
        let attempt_result = (|| {
            let mut m = fit_model(&train_x.select(Axis(0), &idx), &bag_y, cfg.spec, g.random())?;
            let oob_scores = m.scores(&train_x.select(Axis(0), &oob))?;
            m.set_threshold(tune_threshold(&oob_scores, &oob_y)?);
            let (s, _) = m.predict(test_x)?;
            compute_metrics(&s, test_y, m.threshold())
        })();
        match attempt_result {
            Ok(m) => return Ok(m),
            Err(e) => last_err = Some(e),
        }
    }
    Err(Error::Evaluation(format!(
        "bootstrap replicate {r} failed after {MAX_REDRAWS} draws{}",
        last_err.map(|e| format!(": {e}")).unwrap_or_default()
    )))
}
