//! Cross-validated hyperparameter grid search scored by mean fold AUC.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use super::forest::rf_fit;
use super::svm::{fit_from_kernel, row_norms, Kernel};
use super::{fold_seed, to_signed, ModelSpec, Standardizer};
use crate::data::stratified_folds;
use crate::error::{Error, Result};
use crate::eval::metrics::auc;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Svm,
    Forest,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Svm => "svm",
            Family::Forest => "rf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub svm_c: Vec<f64>,
    pub svm_gamma: Vec<f64>,
    pub svm_linear: bool,
    pub svm_rbf: bool,
    pub rf_n_trees: Vec<usize>,
    pub rf_max_depth: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            svm_c: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            svm_gamma: vec![1.0, 0.1, 0.01, 0.001, 0.0001],
            svm_linear: true,
            svm_rbf: true,
            rf_n_trees: vec![10, 50, 100, 500, 1000],
            rf_max_depth: vec![1, 3, 5, 10, 20],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.svm_c.is_empty() || self.svm_c.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::config("grid.svm_c must be a nonempty list of positive values"));
        }
        if !self.svm_linear && !self.svm_rbf {
            return Err(Error::config("grid must enable at least one SVM kernel"));
        }
        if self.svm_rbf
            && (self.svm_gamma.is_empty() || self.svm_gamma.iter().any(|&g| !(g > 0.0 && g.is_finite())))
        {
            return Err(Error::config("grid.svm_gamma must be a nonempty list of positive values"));
        }
        if self.rf_n_trees.is_empty() || self.rf_n_trees.contains(&0) {
            return Err(Error::config("grid.rf_n_trees must be a nonempty list of positive values"));
        }
        if self.rf_max_depth.is_empty() || self.rf_max_depth.contains(&0) {
            return Err(Error::config("grid.rf_max_depth must be a nonempty list of positive values"));
        }
        Ok(())
    }

    /// Grid cells of one family, in declaration order.
    pub fn cells(&self, family: Family) -> Vec<ModelSpec> {
        let mut out = Vec::new();
        match family {
            Family::Svm => {
                for &c in &self.svm_c {
                    if self.svm_linear {
                        out.push(ModelSpec::Svm { kernel: Kernel::Linear, c });
                    }
                    if self.svm_rbf {
                        for &gamma in &self.svm_gamma {
                            out.push(ModelSpec::Svm { kernel: Kernel::Rbf { gamma }, c });
                        }
                    }
                }
            }
            Family::Forest => {
                for &n_trees in &self.rf_n_trees {
                    for &max_depth in &self.rf_max_depth {
                        out.push(ModelSpec::Forest { n_trees, max_depth });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub spec: ModelSpec,
    /// AUC per fold; NaN where the fit failed or the fold was single-class.
    pub fold_aucs: Vec<f64>,
    /// NaN if any fold failed.
    pub mean_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub family: Family,
    pub cells: Vec<CellResult>,
    pub best: usize,
    /// Out-of-fold scores of the best cell, one per training row.
    pub oof_scores: Vec<f64>,
}

impl GridResult {
    pub fn best_spec(&self) -> ModelSpec {
        self.cells[self.best].spec
    }

    pub fn best_auc(&self) -> f64 {
        self.cells[self.best].mean_auc
    }

    /// Rows `model,kernel,C,gamma,n_trees,max_depth,fold,auc`.
    pub fn write_rows<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for cell in &self.cells {
            let (kernel, c, gamma, trees, depth) = match cell.spec {
                ModelSpec::Svm { kernel, c } => (
                    kernel.name().to_string(),
                    c.to_string(),
                    kernel.gamma().map(|g| g.to_string()).unwrap_or_default(),
                    String::new(),
                    String::new(),
                ),
                ModelSpec::Forest { n_trees, max_depth } => (
                    String::new(),
                    String::new(),
                    String::new(),
                    n_trees.to_string(),
                    max_depth.to_string(),
                ),
            };
            for (f, a) in cell.fold_aucs.iter().enumerate() {
                writeln!(
                    w,
                    "{},{kernel},{c},{gamma},{trees},{depth},{f},{a}",
                    self.family.name()
                )?;
            }
        }
        Ok(())
    }
}

pub const SCORE_TABLE_HEADER: &str = "model,kernel,C,gamma,n_trees,max_depth,fold,auc";

pub fn write_score_table(path: &Path, results: &[&GridResult]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{SCORE_TABLE_HEADER}")?;
    for r in results {
        r.write_rows(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// Grid search with stratified folds drawn from `seed`.
pub fn grid_search_k(
    x: &Array2<f64>,
    y: &[u8],
    grid: &GridSpec,
    family: Family,
    k: usize,
    seed: u64,
) -> Result<GridResult> {
    if k < 2 {
        return Err(Error::config("grid search needs at least 2 folds"));
    }
    let folds = stratified_folds(y, k, rng::derive(seed, "grid-folds"));
    grid_search(x, y, grid, family, &folds, seed)
}

/// Grid search over one model family under a fixed fold assignment.
///
/// Every cell is scored by its mean validation AUC across folds. Exact ties
/// go to the simpler cell: smaller C, linear before rbf, smaller gamma; fewer
/// trees, then shallower trees.
pub fn grid_search(
    x: &Array2<f64>,
    y: &[u8],
    grid: &GridSpec,
    family: Family,
    folds: &[usize],
    seed: u64,
) -> Result<GridResult> {
    grid.validate()?;
    if folds.len() != y.len() || x.nrows() != y.len() {
        return Err(Error::shape("features, labels and folds must have the same length"));
    }
    let k = folds.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::config("grid search needs at least 2 folds"));
    }
    let specs = grid.cells(family);
    let n = y.len();
    let mut fold_aucs = vec![vec![f64::NAN; k]; specs.len()];
    let mut oof = vec![vec![f64::NAN; n]; specs.len()];

    for f in 0..k {
        let (tr, va): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| folds[i] != f);
        let ytr: Vec<u8> = tr.iter().map(|&i| y[i]).collect();
        let yva: Vec<u8> = va.iter().map(|&i| y[i]).collect();
        let xtr = x.select(Axis(0), &tr);
        let xva = x.select(Axis(0), &va);
        let scores: Vec<Result<Vec<f64>>> = match family {
            Family::Svm => svm_fold(&xtr, &ytr, &xva, &specs),
            Family::Forest => forest_fold(&xtr, &ytr, &xva, &specs, fold_seed(seed, f)),
        };
        for (ci, s) in scores.into_iter().enumerate() {
            match s {
                Ok(s) => {
                    fold_aucs[ci][f] = auc(&s, &yva).unwrap_or(f64::NAN);
                    for (&i, v) in va.iter().zip(s) {
                        oof[ci][i] = v;
                    }
                }
                Err(e) => log::warn!("grid cell {} failed on fold {f}: {e}", specs[ci].describe()),
            }
        }
    }

    let cells: Vec<CellResult> = specs
        .iter()
        .zip(fold_aucs)
        .map(|(&spec, fold_aucs)| {
            let mean_auc = fold_aucs.iter().sum::<f64>() / k as f64;
            CellResult { spec, fold_aucs, mean_auc }
        })
        .collect();

    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (cells[a].spec.simplicity(), cells[b].spec.simplicity());
        ka.partial_cmp(&kb).expect("finite grid values")
    });
    let mut best: Option<usize> = None;
    for i in order {
        let m = cells[i].mean_auc;
        if m.is_nan() {
            continue;
        }
        if best.is_none_or(|b| m > cells[b].mean_auc) {
            best = Some(i);
        }
    }
    let best = best.ok_or_else(|| Error::Training("every grid cell failed".into()))?;
    log::info!(
        "{} grid: best {} with mean CV AUC {:.4}",
        family.name(),
        cells[best].spec.describe(),
        cells[best].mean_auc
    );
    Ok(GridResult { family, cells, best, oof_scores: oof.swap_remove(best) })
}

/// Validation scores of every SVM cell on one fold, sharing one Gram matrix.
fn svm_fold(
    xtr: &Array2<f64>,
    ytr: &[u8],
    xva: &Array2<f64>,
    specs: &[ModelSpec],
) -> Vec<Result<Vec<f64>>> {
    let prepared = (|| {
        let scaler = Standardizer::fit(xtr)?;
        Ok::<_, Error>((scaler.transform(xtr)?, scaler.transform(xva)?))
    })();
    let (ztr, zva) = match prepared {
        Ok(p) => p,
        Err(e) => return specs.iter().map(|_| Err(e.duplicate())).collect(),
    };
    let g_tt = ztr.dot(&ztr.t());
    let g_vt = zva.dot(&ztr.t());
    let n_tr = row_norms(ztr.view());
    let n_va = row_norms(zva.view());
    let ys = to_signed(ytr);
    specs
        .par_iter()
        .map(|spec| {
            let ModelSpec::Svm { kernel, c } = *spec else {
                return Err(Error::config("non-SVM cell in SVM grid"));
            };
            let k_tt = kernel.from_gram(&g_tt, &n_tr, &n_tr);
            let (model, sv) = fit_from_kernel(&ztr, &ys, kernel, c, &k_tt)?;
            let k_vt = kernel.from_gram(&g_vt, &n_va, &n_tr);
            let k_vs = k_vt.select(Axis(1), &sv);
            let coefs = ndarray::Array1::from(model.dual_coefs.clone());
            Ok(k_vs.dot(&coefs).iter().map(|s| s + model.intercept).collect())
        })
        .collect()
}

/// Validation scores of every forest cell on one fold from a single fit at
/// the largest tree count and depth.
fn forest_fold(
    xtr: &Array2<f64>,
    ytr: &[u8],
    xva: &Array2<f64>,
    specs: &[ModelSpec],
    seed: u64,
) -> Vec<Result<Vec<f64>>> {
    let (mut max_trees, mut max_depth) = (0, 0);
    for s in specs {
        if let ModelSpec::Forest { n_trees, max_depth: d } = *s {
            max_trees = max_trees.max(n_trees);
            max_depth = max_depth.max(d);
        }
    }
    let forest = match rf_fit(xtr, ytr, max_trees, max_depth, seed) {
        Ok(f) => f,
        Err(e) => return specs.iter().map(|_| Err(e.duplicate())).collect(),
    };
    let cells: Vec<(usize, usize)> = specs
        .iter()
        .map(|s| match *s {
            ModelSpec::Forest { n_trees, max_depth } => (n_trees, max_depth),
            _ => (0, 0),
        })
        .collect();
    match forest.scores_grid(xva, &cells) {
        Ok(all) => all.into_iter().map(Ok).collect(),
        Err(e) => specs.iter().map(|_| Err(e.duplicate())).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn blobs(n: usize) -> (Array2<f64>, Vec<u8>) {
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let base = if y[i] == 1 { 1.5 } else { -1.5 };
            base + (((i * 7 + j * 3) % 10) as f64 - 4.5) * 0.3
        });
        (x, y)
    }

    #[test]
    fn single_cell_grid() {
        let (x, y) = blobs(40);
        let grid = GridSpec {
            svm_c: vec![1.0],
            svm_linear: true,
            svm_rbf: false,
            ..GridSpec::default()
        };
        let r = grid_search_k(&x, &y, &grid, Family::Svm, 5, 1).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.best, 0);
        assert_eq!(r.oof_scores.len(), 40);
        assert!(r.oof_scores.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ties_go_to_smaller_c() {
        // Perfectly separable: every C reaches AUC 1 on every fold.
        let (x, y) = blobs(40);
        let grid = GridSpec {
            svm_c: vec![10.0, 1.0],
            svm_linear: true,
            svm_rbf: false,
            ..GridSpec::default()
        };
        let r = grid_search_k(&x, &y, &grid, Family::Svm, 4, 2).unwrap();
        assert_eq!(r.cells[0].mean_auc, r.cells[1].mean_auc);
        assert_eq!(r.best_spec(), ModelSpec::Svm { kernel: Kernel::Linear, c: 1.0 });
    }

    #[test]
    fn forest_cells_match_direct_fits() {
        let (x, y) = blobs(30);
        let grid = GridSpec { rf_n_trees: vec![3, 6], rf_max_depth: vec![1, 2], ..GridSpec::default() };
        let folds = stratified_folds(&y, 3, 11);
        let r = grid_search(&x, &y, &grid, Family::Forest, &folds, 5).unwrap();
        let best = r.best_spec();
        let direct = super::super::out_of_fold_scores(&x, &y, best, &folds, 5).unwrap();
        assert_eq!(direct, r.oof_scores);
    }

    #[test]
    fn paper_grid_sizes() {
        let g = GridSpec::default();
        assert_eq!(g.cells(Family::Svm).len(), 30);
        assert_eq!(g.cells(Family::Forest).len(), 25);
    }
}
