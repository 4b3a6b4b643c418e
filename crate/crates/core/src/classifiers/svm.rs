//! Soft-margin SVM trained by sequential minimal optimization.
//!
//! The dual `min 1/2 a'Qa - e'a, 0 <= a <= C, y'a = 0` with
//! `Q_ij = y_i y_j k(x_i, x_j)` is solved two coordinates at a time, always
//! picking the maximal violating pair. The loop stops once the KKT gap drops
//! below the tolerance, or after `10 n` consecutive iterations that fail to
//! improve the best gap seen so far.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Default KKT tolerance.
pub const KKT_TOL: f64 = 1e-3;
const TAU: f64 = 1e-12;
const HARD_ITER_CAP: usize = 20_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Linear => "linear",
            Kernel::Rbf { .. } => "rbf",
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match self {
            Kernel::Linear => None,
            Kernel::Rbf { gamma } => Some(*gamma),
        }
    }

    pub fn eval(&self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            Kernel::Linear => u.iter().zip(v).map(|(a, b)| a * b).sum(),
            Kernel::Rbf { gamma } => {
                let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
        }
    }

    /// Kernel matrix between the rows of `a` and the rows of `b`, from their
    /// inner products and squared norms.
    pub(crate) fn from_gram(
        &self,
        gram: &Array2<f64>,
        a_norms: &[f64],
        b_norms: &[f64],
    ) -> Array2<f64> {
        match self {
            Kernel::Linear => gram.clone(),
            Kernel::Rbf { gamma } => {
                let mut k = gram.clone();
                for (i, mut row) in k.rows_mut().into_iter().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let d2 = (a_norms[i] + b_norms[j] - 2.0 * *v).max(0.0);
                        *v = (-gamma * d2).exp();
                    }
                }
                k
            }
        }
    }

    pub(crate) fn matrix(&self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
        let gram = a.dot(&b.t());
        self.from_gram(&gram, &row_norms(a), &row_norms(b))
    }
}

pub(crate) fn row_norms(a: ArrayView2<f64>) -> Vec<f64> {
    a.rows().into_iter().map(|r| r.dot(&r)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub c: f64,
    pub support_vectors: Array2<f64>,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coefs: Vec<f64>,
    pub intercept: f64,
    /// Decision cutoff applied to scores by [`SvmModel::predict`].
    pub threshold: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Dual objective `sum a - 1/2 a'Qa` at the returned iterate.
    pub dual_objective: f64,
}

impl SvmModel {
    pub fn n_features(&self) -> usize {
        self.support_vectors.ncols()
    }

    /// Decision values `sum_i a_i y_i k(x_i, x) + b`.
    pub fn decision_function(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features() && self.support_vectors.nrows() > 0 {
            return Err(Error::shape(format!(
                "SVM was trained on {} features, got {}",
                self.n_features(),
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Ok(Vec::new());
        }
        if self.support_vectors.nrows() == 0 {
            return Ok(vec![self.intercept; x.nrows()]);
        }
        let k = self.kernel.matrix(x.view(), self.support_vectors.view());
        let coefs = Array1::from(self.dual_coefs.clone());
        Ok(k.dot(&coefs).iter().map(|s| s + self.intercept).collect())
    }

    /// Scores and labels (`1` iff score > threshold).
    pub fn predict(&self, x: &Array2<f64>) -> Result<(Vec<f64>, Vec<u8>)> {
        let s = self.decision_function(x)?;
        let labels = s.iter().map(|&v| u8::from(v > self.threshold)).collect();
        Ok((s, labels))
    }
}

/// Solver output on a precomputed kernel matrix.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub intercept: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_gap: f64,
}

fn check_labels(y: &[f64]) -> Result<()> {
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::config("SVM labels must be +1 or -1"));
    }
    if !y.contains(&1.0) || !y.contains(&-1.0) {
        return Err(Error::config("SVM training needs both classes"));
    }
    Ok(())
}

/// Fit on raw features; `y` holds +1/-1.
pub fn svm_fit(x: &Array2<f64>, y: &[f64], kernel: Kernel, c: f64) -> Result<SvmModel> {
    if x.nrows() != y.len() {
        return Err(Error::shape(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("SVM input contains non-finite values"));
    }
    check_labels(y)?;
    let k = kernel.matrix(x.view(), x.view());
    Ok(fit_from_kernel(x, y, kernel, c, &k)?.0)
}

pub(crate) fn fit_from_kernel(
    x: &Array2<f64>,
    y: &[f64],
    kernel: Kernel,
    c: f64,
    k: &Array2<f64>,
) -> Result<(SvmModel, Vec<usize>)> {
    check_labels(y)?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::config(format!("C must be positive, got {c}")));
    }
    if let Kernel::Rbf { gamma } = kernel {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {gamma}")));
        }
    }
    let sol = smo_solve(k, y, c, KKT_TOL);
    if !sol.converged {
        log::warn!(
            "SMO stopped after {} iterations without reaching KKT tolerance (gap {:.3e}, C={c}, kernel={})",
            sol.iterations,
            sol.kkt_gap,
            kernel.name()
        );
    }
    let sv: Vec<usize> = (0..y.len()).filter(|&i| sol.alpha[i] > 0.0).collect();
    let model = SvmModel {
        kernel,
        c,
        support_vectors: x.select(Axis(0), &sv),
        dual_coefs: sv.iter().map(|&i| sol.alpha[i] * y[i]).collect(),
        intercept: sol.intercept,
        threshold: 0.0,
        converged: sol.converged,
        iterations: sol.iterations,
        dual_objective: sol.objective,
    };
    Ok((model, sv))
}

/// Maximal-violating-pair SMO on a precomputed kernel matrix.
pub fn smo_solve(k: &Array2<f64>, y: &[f64], c: f64, tol: f64) -> DualSolution {
    let n = y.len();
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let diag: Vec<f64> = (0..n).map(|i| k[[i, i]]).collect();

    let is_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let is_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);

    // Stop early after 10n consecutive steps that fail to improve the dual.
    let stall_limit = 10 * n.max(1);
    let mut stall = 0usize;
    let mut obj = 0.0f64;
    let mut iterations = 0usize;
    let mut converged = false;
    let mut gap;

    loop {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if is_up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = t;
            }
            if is_low(alpha[t], y[t]) && v < gmin {
                gmin = v;
                j = t;
            }
        }
        gap = gmax - gmin;
        if i == usize::MAX || j == usize::MAX || gap < tol {
            converged = true;
            break;
        }
        if stall >= stall_limit || iterations >= HARD_ITER_CAP {
            break;
        }
        iterations += 1;

        let (ai_old, aj_old) = (alpha[i], alpha[j]);
        let kij = k[[i, j]];
        if y[i] != y[j] {
            let quad = (diag[i] + diag[j] - 2.0 * kij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (diag[i] + diag[j] - 2.0 * kij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let di = alpha[i] - ai_old;
        let dj = alpha[j] - aj_old;
        let (yi, yj) = (y[i], y[j]);
        // Change of ½a'Qa - e'a, which SMO minimizes.
        let df = grad[i] * di
            + grad[j] * dj
            + 0.5 * (diag[i] * di * di + diag[j] * dj * dj)
            + yi * yj * kij * di * dj;
        if -df > 1e-15 * (1.0 + obj.abs()) {
            stall = 0;
        } else {
            stall += 1;
        }
        obj += df;
        let ki = k.row(i);
        let kj = k.row(j);
        for t in 0..n {
            grad[t] += y[t] * (yi * ki[t] * di + yj * kj[t] * dj);
        }
    }

    // Intercept: average over free vectors, else midpoint of the bounds.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            sum_free += yg;
            n_free += 1;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };
    let objective = -0.5 * alpha.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>();
    DualSolution {
        alpha,
        intercept: -rho,
        objective,
        iterations,
        converged,
        kkt_gap: gap,
    }
}

/// Dual objective `sum a - 1/2 a'Qa` for arbitrary `a`.
pub fn dual_objective(k: &Array2<f64>, y: &[f64], alpha: &[f64]) -> f64 {
    let n = y.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * k[[i, j]];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separable_blobs_linear() {
        let x = array![
            [2.0, 2.0],
            [3.0, 2.5],
            [2.5, 3.5],
            [-2.0, -2.0],
            [-3.0, -1.5],
            [-2.5, -3.0]
        ];
        let y = [1.0, 1.0, 1.0, -1.0, -1.0, -1.0];
        let m = svm_fit(&x, &y, Kernel::Linear, 1.0).unwrap();
        assert!(m.converged);
        let (_, labels) = m.predict(&x).unwrap();
        assert_eq!(labels, vec![1, 1, 1, 0, 0, 0]);
        for &a in &m.dual_coefs {
            assert!(a.abs() > 0.0 && a.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn xor_rbf() {
        let base = [([0.0, 0.0], 1.0), ([1.0, 1.0], 1.0), ([0.0, 1.0], -1.0), ([1.0, 0.0], -1.0)];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..10 {
            for (p, l) in base {
                rows.extend_from_slice(&p);
                y.push(l);
            }
        }
        let x = Array2::from_shape_vec((40, 2), rows).unwrap();
        let m = svm_fit(&x, &y, Kernel::Rbf { gamma: 1.0 }, 10.0).unwrap();
        let (_, labels) = m.predict(&x).unwrap();
        let expect: Vec<u8> = y.iter().map(|&v| u8::from(v > 0.0)).collect();
        assert_eq!(labels, expect);
    }

    #[test]
    fn single_class_rejected() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(svm_fit(&x, &[1.0, 1.0], Kernel::Linear, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn objective_matches_direct_evaluation() {
        let x = array![[0.0, 1.0], [1.0, 0.3], [2.0, 2.0], [-1.0, 0.5], [0.5, -1.0]];
        let y = [1.0, -1.0, 1.0, -1.0, 1.0];
        let k = Kernel::Rbf { gamma: 0.5 }.matrix(x.view(), x.view());
        let sol = smo_solve(&k, &y, 2.0, 1e-6);
        let direct = dual_objective(&k, &y, &sol.alpha);
        assert!((direct - sol.objective).abs() < 1e-10);
        let eq: f64 = sol.alpha.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!(eq.abs() < 1e-12);
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let x = array![[1.0], [-1.0]];
        let m = svm_fit(&x, &[1.0, -1.0], Kernel::Linear, 1.0).unwrap();
        let (s, l) = m.predict(&Array2::zeros((0, 1))).unwrap();
        assert!(s.is_empty() && l.is_empty());
        assert!(m.predict(&Array2::zeros((1, 3))).is_err());
    }
}
