//! Confusion-matrix metrics, rank AUC and ROC curves. ASD is the positive
//! class.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub confusion: Confusion,
}

impl Metrics {
    /// `(name, value)` pairs in report order.
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("accuracy", self.accuracy),
            ("auc", self.auc),
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.named().iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

pub const METRIC_NAMES: [&str; 4] = ["sensitivity", "specificity", "accuracy", "auc"];

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::data("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::data("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation("AUC is undefined with a single class".into()));
    }
    Ok((pos, neg))
}

/// Confusion counts for `label = 1 iff score > threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Confusion {
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    check(scores, labels)?;
    let c = confusion(scores, labels, threshold);
    let total = (c.tp + c.fp + c.tn + c.fn_) as f64;
    Ok(Metrics {
        accuracy: (c.tp + c.tn) as f64 / total,
        sensitivity: c.tp as f64 / (c.tp + c.fn_) as f64,
        specificity: c.tn as f64 / (c.tn + c.fp) as f64,
        auc: auc(scores, labels)?,
        confusion: c,
    })
}

fn sorted_pairs(scores: &[f64], labels: &[u8]) -> Vec<(f64, u8)> {
    let mut p: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    p.sort_by(|a, b| a.0.total_cmp(&b.0));
    p
}

/// Mann–Whitney AUC; tied positive/negative pairs count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let pairs = sorted_pairs(scores, labels);
    let (mut wins, mut neg_below) = (0.0f64, 0usize);
    let mut k = 0;
    while k < pairs.len() {
        let v = pairs[k].0;
        let (mut gp, mut gn) = (0usize, 0usize);
        while k < pairs.len() && pairs[k].0 == v {
            if pairs[k].1 == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            k += 1;
        }
        wins += (gp * neg_below) as f64 + 0.5 * (gp * gn) as f64;
        neg_below += gn;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// ROC vertices `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct
/// score, sweeping the threshold downward.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check(scores, labels)?;
    let pairs = sorted_pairs(scores, labels);
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = pairs.len();
    while k > 0 {
        let v = pairs[k - 1].0;
        while k > 0 && pairs[k - 1].0 == v {
            if pairs[k - 1].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        out.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(out)
}

/// Trapezoidal area under a polyline.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_scores() {
        let m = compute_metrics(&[0.0, 0.0, 1.0, 1.0], &[0, 0, 1, 1], 0.5).unwrap();
        assert_eq!((m.accuracy, m.sensitivity, m.specificity, m.auc), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_scores_give_half() {
        assert_eq!(auc(&[0.3; 6], &[0, 1, 1, 0, 1, 0]).unwrap(), 0.5);
        let r = roc_points(&[0.3; 4], &[0, 1, 1, 0]).unwrap();
        assert_eq!(r, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(trapezoid(&r), 0.5);
    }

    #[test]
    fn four_pair_enumeration() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn separable_roc_passes_through_corner() {
        let r = roc_points(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert!(r.contains(&(0.0, 1.0)));
        assert_eq!(*r.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::Evaluation(_))));
        assert!(roc_points(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn identities_on_counts() {
        let s = [0.1, 0.6, 0.3, 0.9, 0.5, 0.2];
        let l = [0, 1, 1, 1, 0, 0];
        let m = compute_metrics(&s, &l, 0.4).unwrap();
        let c = m.confusion;
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (2, 1, 2, 1));
        assert_eq!(m.accuracy, 4.0 / 6.0);
        assert_eq!(m.sensitivity, 2.0 / 3.0);
        assert_eq!(m.specificity, 2.0 / 3.0);
    }
}
