//! Label-permutation significance test of held-out accuracy.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::classifiers::fit_tuned;
use crate::error::{Error, Result};
use crate::rng;

use super::metrics::confusion;
use super::ClassifierConfig;

const MAX_REDRAWS: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationResult {
    pub observed: f64,
    pub permuted: Vec<f64>,
    pub p_value: f64,
}

/// Add-one p-value `(1 + #{permuted >= observed}) / (N + 1)`.
pub fn permutation_p_value(observed: f64, permuted: &[f64]) -> f64 {
    let hits = permuted.iter().filter(|&&v| v >= observed).count();
    (1 + hits) as f64 / (permuted.len() + 1) as f64
}

/// Held-out accuracy at the out-of-fold tuned threshold.
fn holdout_accuracy(
    x: &Array2<f64>,
    y: &[u8],
    train: &[usize],
    test: &[usize],
    cfg: &ClassifierConfig,
) -> Result<f64> {
    let ytr: Vec<u8> = train.iter().map(|&i| y[i]).collect();
    let yte: Vec<u8> = test.iter().map(|&i| y[i]).collect();
    let m = fit_tuned(&x.select(Axis(0), train), &ytr, cfg.spec, cfg.threshold_folds, cfg.seed)?;
    let (s, _) = m.predict(&x.select(Axis(0), test))?;
    let c = confusion(&s, &yte, m.threshold());
    Ok((c.tp + c.tn) as f64 / yte.len() as f64)
}

/// Observed accuracy under the real labels versus `n` refits with the labels
/// of all rows (training and test together) shuffled.
pub fn permutation_test(
    x: &Array2<f64>,
    y: &[u8],
    train: &[usize],
    test: &[usize],
    cfg: &ClassifierConfig,
    n: usize,
    seed: u64,
) -> Result<PermutationResult> {
    if n < 1 {
        return Err(Error::config("permutation test needs at least one iteration"));
    }
    if test.is_empty() {
        return Err(Error::config("permutation test needs a nonempty test set"));
    }
    let observed = holdout_accuracy(x, y, train, test, cfg)?;
    let rows: Vec<usize> = train.iter().chain(test).copied().collect();
    let permuted: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|it| {
            let mut last_err = None;
            for attempt in 0..MAX_REDRAWS {
                let mut g = rng::stream(rng::derive(seed, &format!("permutation-{attempt}")), it);
                let mut labels: Vec<u8> = rows.iter().map(|&i| y[i]).collect();
                labels.shuffle(&mut g);
                let mut yp = y.to_vec();
                for (&i, &l) in rows.iter().zip(&labels) {
                    yp[i] = l;
                }
                match holdout_accuracy(x, &yp, train, test, cfg) {
                    Ok(a) => return Ok(a),
                    Err(e) => last_err = Some(e),
                }
            }
            Err(Error::Evaluation(format!(
                "permutation {it} failed after {MAX_REDRAWS} draws{}",
                last_err.map(|e| format!(": {e}")).unwrap_or_default()
            )))
        })
        .collect::<Result<_>>()?;
    Ok(PermutationResult { observed, p_value: permutation_p_value(observed, &permuted), permuted })
}
