//! Pearson functional-connectivity matrices and their lower-triangle
//! vectorization.
//!
//! Vectors list entries `(i, j)` with `i >= j`, row by row over the lower
//! triangle (diagonal included), so an `R`-ROI matrix yields `R(R+1)/2`
//! features.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// ROI time series: rows are time points, columns are ROIs.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTimeSeries {
    values: Array2<f64>,
}

impl RoiTimeSeries {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() < 3 {
            return Err(Error::shape(format!(
                "time series needs at least 3 time points, got {}",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::shape("time series has no ROIs"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("time series contains non-finite values"));
        }
        Ok(RoiTimeSeries { values })
    }

    pub fn roi_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn time_points(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Symmetric correlation matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    values: Array2<f64>,
}

impl ConnectivityMatrix {
    /// Validates symmetry, unit diagonal, and entries in `[-1, 1]`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let r = values.nrows();
        if values.ncols() != r {
            return Err(Error::shape(format!(
                "connectivity matrix must be square, got {}x{}",
                r,
                values.ncols()
            )));
        }
        for i in 0..r {
            if values[[i, i]] != 1.0 {
                return Err(Error::data(format!("diagonal entry ({i},{i}) is not 1")));
            }
            for j in 0..i {
                let v = values[[i, j]];
                if v != values[[j, i]] {
                    return Err(Error::data(format!("matrix not symmetric at ({i},{j})")));
                }
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::data(format!("entry ({i},{j}) = {v} outside [-1, 1]")));
                }
            }
        }
        Ok(ConnectivityMatrix { values })
    }

    pub fn roi_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Array1<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Number of vectorized features for `roi_count` ROIs.
pub const fn feature_len(roi_count: usize) -> usize {
    roi_count * (roi_count + 1) / 2
}

/// Inverse of [`feature_len`], if `len` is a triangular number.
pub fn roi_count_for_len(len: usize) -> Option<usize> {
    let r = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (r.saturating_sub(1)..=r + 1).find(|&c| feature_len(c) == len)
}

/// ROIs whose time series has zero variance.
pub fn zero_variance_rois(ts: &RoiTimeSeries) -> Vec<usize> {
    centered_columns(ts)
        .1
        .iter()
        .enumerate()
        .filter(|(_, &ss)| ss == 0.0)
        .map(|(i, _)| i)
        .collect()
}

fn centered_columns(ts: &RoiTimeSeries) -> (Array2<f64>, Vec<f64>) {
    let x = ts.values();
    let means = x.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = x - &means;
    let ss = centered
        .columns()
        .into_iter()
        .map(|c| c.dot(&c))
        .collect();
    (centered, ss)
}

/// Pearson correlation between every pair of ROIs.
///
/// Columns with zero variance correlate 0 with everything else (diagonal
/// stays 1) and are reported with a warning.
pub fn pearson_matrix(ts: &RoiTimeSeries) -> ConnectivityMatrix {
    let r = ts.roi_count();
    let (centered, ss) = centered_columns(ts);
    for (i, &s) in ss.iter().enumerate() {
        if s == 0.0 {
            log::warn!("ROI {i} has zero variance; its correlations are set to 0");
        }
    }
    let cross = centered.t().dot(&centered);
    let mut m = Array2::<f64>::zeros((r, r));
    for i in 0..r {
        m[[i, i]] = 1.0;
        for j in 0..i {
            let v = if ss[i] == 0.0 || ss[j] == 0.0 {
                0.0
            } else {
                (cross[[i, j]] / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0)
            };
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    ConnectivityMatrix { values: m }
}

pub fn vectorize(c: &ConnectivityMatrix) -> FeatureVector {
    let r = c.roi_count();
    let mut out = Vec::with_capacity(feature_len(r));
    for i in 0..r {
        for j in 0..=i {
            out.push(c.values[[i, j]]);
        }
    }
    FeatureVector(Array1::from(out))
}

pub fn devectorize(v: &FeatureVector, roi_count: usize) -> Result<ConnectivityMatrix> {
    let need = feature_len(roi_count);
    if v.len() != need {
        return Err(Error::shape(format!(
            "{roi_count} ROIs need a vector of length {need}, got {}",
            v.len()
        )));
    }
    let mut m = Array2::<f64>::zeros((roi_count, roi_count));
    let mut k = 0;
    for i in 0..roi_count {
        for j in 0..=i {
            m[[i, j]] = v.0[k];
            m[[j, i]] = v.0[k];
            k += 1;
        }
    }
    ConnectivityMatrix::from_values(m)
}
