//! Decision-threshold tuning by the geometric mean of sensitivity and
//! specificity.

use crate::error::{Error, Result};

/// `sqrt(sensitivity * specificity)` for labels predicted `score > threshold`.
pub fn gmean_at(scores: &[f64], y: &[u8], threshold: f64) -> f64 {
    let (mut tp, mut tn, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(y) {
        if l == 1 {
            pos += 1;
            tp += usize::from(s > threshold);
        } else {
            neg += 1;
            tn += usize::from(s <= threshold);
        }
    }
    gmean(tp, pos, tn, neg)
}

fn gmean(tp: usize, pos: usize, tn: usize, neg: usize) -> f64 {
    (tp as f64 / pos as f64 * (tn as f64 / neg as f64)).sqrt()
}

/// Candidate cuts: `-inf`, midpoints between consecutive distinct scores, `+inf`.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut c = Vec::with_capacity(u.len() + 1);
    c.push(f64::NEG_INFINITY);
    c.extend(u.windows(2).map(|w| w[0] / 2.0 + w[1] / 2.0));
    c.push(f64::INFINITY);
    c
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        s[n / 2 - 1] / 2.0 + s[n / 2] / 2.0
    }
}

/// Whether candidate `a` beats incumbent `b` on the tie rule: closer to the
/// median score, then the larger cut.
pub(crate) fn prefer(a: f64, b: f64, med: f64) -> bool {
    let (da, db) = ((a - med).abs(), (b - med).abs());
    da < db || (da == db && a > b)
}

/// Threshold maximizing the geometric mean; ties go to the cut closest to
/// the median score, then to the larger cut.
pub fn tune_threshold(scores: &[f64], y: &[u8]) -> Result<f64> {
    if scores.len() != y.len() {
        return Err(Error::shape(format!("{} scores but {} labels", scores.len(), y.len())));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(Error::config("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::data("scores contain NaN"));
    }
    let pos = y.iter().filter(|&&l| l == 1).count();
    let neg = y.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::config("threshold tuning needs both classes"));
    }
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let med = median(scores);

    // Sweep upward: at cut t, everything with score <= t is predicted control.
    let mut best_t = f64::NEG_INFINITY;
    let mut best_g = gmean(pos, pos, 0, neg);
    let (mut tp, mut tn) = (pos, 0usize);
    let mut k = 0;
    while k < pairs.len() {
        let v = pairs[k].0;
        while k < pairs.len() && pairs[k].0 == v {
            if pairs[k].1 == 1 {
                tp -= 1;
            } else {
                tn += 1;
            }
            k += 1;
        }
        let t = if k < pairs.len() { v / 2.0 + pairs[k].0 / 2.0 } else { f64::INFINITY };
        let g = gmean(tp, pos, tn, neg);
        if g > best_g || (g == best_g && prefer(t, best_t, med)) {
            best_g = g;
            best_t = t;
        }
    }
    Ok(best_t)
}
