//! Parametric empirical-Bayes ComBat harmonization.
//!
//! Site effects are estimated per feature by least squares with covariates,
//! then shrunk toward per-site priors (normal for the location, inverse-gamma
//! for the scale) whose hyperparameters come from the method of moments
//! across features. Covariate effects are kept in the adjusted output.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const COMBAT_MAGIC: &[u8; 8] = b"CMBT0001";

/// Floor on pooled variances and on the across-feature variance of the
/// per-site scale estimates.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const MAX_ITER: usize = 100;
const CONV_TOL: f64 = 1e-4;

/// Per-site prior hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteHyper {
    pub gamma_bar: f64,
    pub tau2: f64,
    pub lambda: f64,
    pub theta: f64,
    /// False when the scale estimates were effectively constant and no
    /// shrinkage was applied.
    pub shrunk: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombatModel {
    pub alpha: Array1<f64>,
    /// Covariate coefficients, `p x V`.
    pub beta: Array2<f64>,
    pub sigma: Array1<f64>,
    /// `S x V`, standardized units.
    pub gamma_star: Array2<f64>,
    /// `S x V`, standardized units.
    pub delta2_star: Array2<f64>,
    pub site_table: Vec<u32>,
    pub hyper: Vec<SiteHyper>,
    /// Column means subtracted from the covariates before fitting.
    pub covariate_center: Vec<f64>,
    /// Zero-variance features passed through unchanged.
    pub skipped: Vec<bool>,
    pub converged: bool,
}

/// Unshrunk per-site estimates, kept for inspection.
#[derive(Debug, Clone)]
pub struct CombatDiagnostics {
    pub gamma_hat: Array2<f64>,
    pub delta2_hat: Array2<f64>,
}

impl CombatModel {
    pub fn n_features(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_center.len()
    }

    fn site_index(&self, site: u32) -> Option<usize> {
        self.site_table.binary_search(&site).ok()
    }
}

pub fn combat_fit(
    features: &Array2<f64>,
    sites: &[u32],
    covariates: &Array2<f64>,
) -> Result<CombatModel> {
    combat_fit_with_diagnostics(features, sites, covariates).map(|(m, _)| m)
}

pub fn combat_fit_with_diagnostics(
    y: &Array2<f64>,
    sites: &[u32],
    covariates: &Array2<f64>,
) -> Result<(CombatModel, CombatDiagnostics)> {
    let (n, v) = y.dim();
    let p = covariates.ncols();
    if sites.len() != n || covariates.nrows() != n {
        return Err(Error::shape(format!(
            "{n} feature rows, {} site ids, {} covariate rows",
            sites.len(),
            covariates.nrows()
        )));
    }
    if y.iter().chain(covariates.iter()).any(|x| !x.is_finite()) {
        return Err(Error::data("ComBat input contains non-finite values"));
    }

    let mut site_table: Vec<u32> = sites.to_vec();
    site_table.sort_unstable();
    site_table.dedup();
    let n_sites = site_table.len();
    let site_of: Vec<usize> = sites
        .iter()
        .map(|s| site_table.binary_search(s).unwrap())
        .collect();
    let mut counts = vec![0usize; n_sites];
    for &i in &site_of {
        counts[i] += 1;
    }
    for (s, &c) in site_table.iter().zip(&counts) {
        if c < 2 {
            return Err(Error::config(format!(
                "site {s} has {c} subject(s); ComBat needs at least 2 per site"
            )));
        }
    }
    if n <= p + n_sites {
        return Err(Error::config(format!(
            "{n} subjects cannot identify {n_sites} site effects plus {p} covariates"
        )));
    }

    let center: Array1<f64> = covariates.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(p));
    let xc = covariates - &center;

    // Design: site indicators then centered covariates.
    let q = n_sites + p;
    let mut design = Array2::<f64>::zeros((n, q));
    for (j, &i) in site_of.iter().enumerate() {
        design[[j, i]] = 1.0;
        for c in 0..p {
            design[[j, n_sites + c]] = xc[[j, c]];
        }
    }
    let gram = design.t().dot(&design);
    let rhs = design.t().dot(y);
    let coef = solve_spd(&gram, &rhs).ok_or_else(|| {
        Error::config("design matrix is singular (constant or collinear covariates?)")
    })?;

    let mut alpha = Array1::<f64>::zeros(v);
    for i in 0..n_sites {
        alpha.scaled_add(counts[i] as f64 / n as f64, &coef.row(i));
    }
    let beta = coef.slice(ndarray::s![n_sites.., ..]).to_owned();

    let fitted = design.dot(&coef);
    let mut var_pooled = Array1::<f64>::zeros(v);
    for (row_y, row_f) in y.rows().into_iter().zip(fitted.rows()) {
        for ((acc, a), b) in var_pooled.iter_mut().zip(row_y).zip(row_f) {
            *acc += (a - b) * (a - b);
        }
    }
    var_pooled /= n as f64;
    let skipped: Vec<bool> = var_pooled.iter().map(|&s| s < VARIANCE_FLOOR).collect();
    let n_skipped = skipped.iter().filter(|&&s| s).count();
    if n_skipped > 0 {
        log::warn!("{n_skipped} zero-variance feature(s) left unadjusted by ComBat");
    }
    let sigma = var_pooled.mapv(f64::sqrt);

    let stand_mean = xc.dot(&beta) + &alpha;
    let mut z = y - &stand_mean;
    for (mut col, (&skip, &sd)) in z.columns_mut().into_iter().zip(skipped.iter().zip(&sigma)) {
        if skip {
            col.fill(0.0);
        } else {
            col /= sd;
        }
    }

    // Per-site location and scale of the standardized data.
    let mut gamma_hat = Array2::<f64>::zeros((n_sites, v));
    for (j, &i) in site_of.iter().enumerate() {
        let mut g = gamma_hat.row_mut(i);
        g += &z.row(j);
    }
    for i in 0..n_sites {
        gamma_hat.row_mut(i).mapv_inplace(|x| x / counts[i] as f64);
    }
    let mut delta2_hat = Array2::<f64>::zeros((n_sites, v));
    for (j, &i) in site_of.iter().enumerate() {
        let zr = z.row(j);
        let gr = gamma_hat.row(i);
        for ((d, zz), g) in delta2_hat.row_mut(i).iter_mut().zip(zr).zip(gr) {
            *d += (zz - g) * (zz - g);
        }
    }
    for i in 0..n_sites {
        delta2_hat.row_mut(i).mapv_inplace(|x| x / counts[i] as f64);
    }

    let active: Vec<usize> = (0..v).filter(|&c| !skipped[c]).collect();
    let mut gamma_star = gamma_hat.clone();
    let mut delta2_star = delta2_hat.clone();
    let mut hyper = Vec::with_capacity(n_sites);
    let mut converged = true;

    for i in 0..n_sites {
        let g: Vec<f64> = active.iter().map(|&c| gamma_hat[[i, c]]).collect();
        let d: Vec<f64> = active.iter().map(|&c| delta2_hat[[i, c]]).collect();
        let gamma_bar = mean(&g);
        let tau2 = sample_var(&g);
        let m = mean(&d);
        let s2 = sample_var(&d);
        if active.is_empty() || s2 < VARIANCE_FLOOR {
            hyper.push(SiteHyper {
                gamma_bar,
                tau2,
                lambda: f64::NAN,
                theta: f64::NAN,
                shrunk: false,
            });
            continue;
        }
        let lambda = (m * m + 2.0 * s2) / s2;
        let theta = (m * m * m + m * s2) / s2;
        let ni = counts[i] as f64;

        let mut g_old = g.clone();
        let mut d_old = d.clone();
        let mut site_converged = false;
        for _ in 0..MAX_ITER {
            let mut change = 0.0f64;
            let mut g_new = vec![0.0; g.len()];
            let mut d_new = vec![0.0; g.len()];
            for k in 0..g.len() {
                let gn = (ni * tau2 * g[k] + d_old[k] * gamma_bar) / (ni * tau2 + d_old[k]);
                // sum_j (z_j - gn)^2 = n (delta_hat + (gamma_hat - gn)^2)
                let ss = ni * (d[k] + (g[k] - gn) * (g[k] - gn));
                let dn = (theta + 0.5 * ss) / (ni / 2.0 + lambda - 1.0);
                change = change
                    .max(rel_change(gn, g_old[k]))
                    .max(rel_change(dn, d_old[k]));
                g_new[k] = gn;
                d_new[k] = dn;
            }
            g_old = g_new;
            d_old = d_new;
            if change < CONV_TOL {
                site_converged = true;
                break;
            }
        }
        if !site_converged {
            log::warn!(
                "ComBat EB iteration for site {} did not converge in {MAX_ITER} iterations",
                site_table[i]
            );
            converged = false;
        }
        for (k, &c) in active.iter().enumerate() {
            gamma_star[[i, c]] = g_old[k];
            delta2_star[[i, c]] = d_old[k];
        }
        hyper.push(SiteHyper {
            gamma_bar,
            tau2,
            lambda,
            theta,
            shrunk: true,
        });
    }
    delta2_star.mapv_inplace(|x| x.max(VARIANCE_FLOOR));
    for (i, row) in skipped.iter().enumerate() {
        if *row {
            gamma_star.column_mut(i).fill(0.0);
            delta2_star.column_mut(i).fill(1.0);
        }
    }

    let model = CombatModel {
        alpha,
        beta,
        sigma,
        gamma_star,
        delta2_star,
        site_table,
        hyper,
        covariate_center: center.to_vec(),
        skipped,
        converged,
    };
    Ok((
        model,
        CombatDiagnostics {
            gamma_hat,
            delta2_hat,
        },
    ))
}

pub fn combat_apply(
    model: &CombatModel,
    y: &Array2<f64>,
    sites: &[u32],
    covariates: &Array2<f64>,
) -> Result<Array2<f64>> {
    let (n, v) = y.dim();
    if v != model.n_features() {
        return Err(Error::shape(format!(
            "model has {} features, input has {v}",
            model.n_features()
        )));
    }
    if sites.len() != n || covariates.nrows() != n {
        return Err(Error::shape("site/covariate rows do not match feature rows"));
    }
    if covariates.ncols() != model.n_covariates() {
        return Err(Error::shape(format!(
            "model expects {} covariates, got {}",
            model.n_covariates(),
            covariates.ncols()
        )));
    }
    let site_idx: Vec<usize> = sites
        .iter()
        .map(|&s| {
            model
                .site_index(s)
                .ok_or_else(|| Error::data(format!("site {s} was not seen when fitting ComBat")))
        })
        .collect::<Result<_>>()?;

    let center = Array1::from(model.covariate_center.clone());
    let xc = covariates - &center;
    let stand_mean = xc.dot(&model.beta) + &model.alpha;
    let mut out = y.clone();
    for (j, mut row) in out.rows_mut().into_iter().enumerate() {
        let i = site_idx[j];
        for c in 0..v {
            if model.skipped[c] {
                continue;
            }
            let sd = model.sigma[c];
            let mu = stand_mean[[j, c]];
            let zz = (row[c] - mu) / sd;
            let adj = (zz - model.gamma_star[[i, c]]) / model.delta2_star[[i, c]].sqrt();
            row[c] = sd * adj + mu;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization: magic, (S, V, p) as u64, then every field in declaration
// order as little-endian f64.

pub fn encode_model(m: &CombatModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.magic(COMBAT_MAGIC);
    w.u64(m.site_table.len() as u64);
    w.u64(m.n_features() as u64);
    w.u64(m.n_covariates() as u64);
    w.f64s(&m.alpha);
    w.f64s(&m.beta);
    w.f64s(&m.sigma);
    w.f64s(&m.gamma_star);
    w.f64s(&m.delta2_star);
    for s in &m.site_table {
        w.f64(f64::from(*s));
    }
    for h in &m.hyper {
        w.f64s(&[h.gamma_bar, h.tau2, h.lambda, h.theta, f64::from(u8::from(h.shrunk))]);
    }
    w.f64s(&m.covariate_center);
    for s in &m.skipped {
        w.f64(f64::from(u8::from(*s)));
    }
    w.f64(f64::from(u8::from(m.converged)));
    w.buf
}

pub fn decode_model(bytes: &[u8]) -> Result<CombatModel> {
    let mut r = Reader::new(bytes, "ComBat model");
    r.expect_magic(COMBAT_MAGIC)?;
    let s = r.dim()?;
    let v = r.dim()?;
    let p = r.dim()?;
    let arr1 = |r: &mut Reader, n| r.f64s(n).map(Array1::from);
    let arr2 = |r: &mut Reader, a, b| {
        r.f64s(a * b)
            .map(|d| Array2::from_shape_vec((a, b), d).expect("sized"))
    };
    let alpha = arr1(&mut r, v)?;
    let beta = arr2(&mut r, p, v)?;
    let sigma = arr1(&mut r, v)?;
    let gamma_star = arr2(&mut r, s, v)?;
    let delta2_star = arr2(&mut r, s, v)?;
    let site_table = r.f64s(s)?.into_iter().map(|x| x as u32).collect();
    let hyper = (0..s)
        .map(|_| {
            let h = r.f64s(5)?;
            Ok(SiteHyper {
                gamma_bar: h[0],
                tau2: h[1],
                lambda: h[2],
                theta: h[3],
                shrunk: h[4] != 0.0,
            })
        })
        .collect::<Result<_>>()?;
    let covariate_center = r.f64s(p)?;
    let skipped = r.f64s(v)?.into_iter().map(|x| x != 0.0).collect();
    let converged = r.f64()? != 0.0;
    r.finish()?;
    Ok(CombatModel {
        alpha,
        beta,
        sigma,
        gamma_star,
        delta2_star,
        site_table,
        hyper,
        covariate_center,
        skipped,
        converged,
    })
}

pub fn save_model(path: &Path, m: &CombatModel) -> Result<()> {
    std::fs::write(path, encode_model(m))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CombatModel> {
    decode_model(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

fn sample_var(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

fn rel_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(1e-10)
}

/// Solve `a x = b` for symmetric positive-definite `a` by Cholesky.
fn solve_spd(a: &Array2<f64>, b: &Array2<f64>) -> Option<Array2<f64>> {
    let q = a.nrows();
    let mut l = Array2::<f64>::zeros((q, q));
    for i in 0..q {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 1e-12 * a[[i, i]].abs().max(1e-300) {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut x = b.clone();
    for mut col in x.columns_mut() {
        for i in 0..q {
            let mut s = col[i];
            for k in 0..i {
                s -= l[[i, k]] * col[k];
            }
            col[i] = s / l[[i, i]];
        }
        for i in (0..q).rev() {
            let mut s = col[i];
            for k in i + 1..q {
                s -= l[[k, i]] * col[k];
            }
            col[i] = s / l[[i, i]];
        }
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise(n: usize, v: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_fn((n, v), |_| r.sample(StandardNormal))
    }

    #[test]
    fn cholesky_solves() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let b = array![[2.0], [1.0]];
        let x = solve_spd(&a, &b).unwrap();
        let back = a.dot(&x);
        assert!((back[[0, 0]] - 2.0).abs() < 1e-12 && (back[[1, 0]] - 1.0).abs() < 1e-12);
        assert!(solve_spd(&array![[1.0, 1.0], [1.0, 1.0]], &b).is_none());
    }

    #[test]
    fn single_site_is_identity() {
        let y = noise(60, 8, 1);
        let sites = vec![3u32; 60];
        let cov = Array2::zeros((60, 0));
        let m = combat_fit(&y, &sites, &cov).unwrap();
        let out = combat_apply(&m, &y, &sites, &cov).unwrap();
        let err = (&out - &y).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-8, "max deviation {err}");
    }

    #[test]
    fn singleton_site_rejected() {
        let y = noise(5, 3, 2);
        let sites = vec![0, 0, 0, 0, 1];
        let err = combat_fit(&y, &sites, &Array2::zeros((5, 0))).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("site 1")));
    }

    #[test]
    fn unseen_site_rejected_on_apply() {
        let y = noise(20, 3, 3);
        let sites: Vec<u32> = (0..20).map(|i| i % 2).collect();
        let cov = Array2::zeros((20, 0));
        let m = combat_fit(&y, &sites, &cov).unwrap();
        let other = vec![7u32; 20];
        assert!(matches!(combat_apply(&m, &y, &other, &cov), Err(Error::Data(_))));
    }

    #[test]
    fn zero_variance_feature_passes_through() {
        let mut y = noise(30, 4, 4);
        y.column_mut(2).fill(1.0);
        let sites: Vec<u32> = (0..30).map(|i| i % 3).collect();
        let cov = Array2::zeros((30, 0));
        let m = combat_fit(&y, &sites, &cov).unwrap();
        assert!(m.skipped[2] && !m.skipped[0]);
        let out = combat_apply(&m, &y, &sites, &cov).unwrap();
        assert!(out.column(2).iter().all(|&x| x == 1.0));
        assert!(out.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn gamma_star_between_hat_and_prior_mean() {
        let mut y = noise(90, 40, 5);
        let sites: Vec<u32> = (0..90).map(|i| i % 3).collect();
        for (j, mut row) in y.rows_mut().into_iter().enumerate() {
            row += (sites[j] as f64) - 1.0;
        }
        let cov = Array2::zeros((90, 0));
        let (m, diag) = combat_fit_with_diagnostics(&y, &sites, &cov).unwrap();
        for i in 0..3 {
            let gb = m.hyper[i].gamma_bar;
            for c in 0..40 {
                let (lo, hi) = {
                    let g = diag.gamma_hat[[i, c]];
                    (g.min(gb), g.max(gb))
                };
                let gs = m.gamma_star[[i, c]];
                assert!(gs >= lo - 1e-12 && gs <= hi + 1e-12);
                assert!(m.delta2_star[[i, c]] > 0.0);
            }
        }
    }

    #[test]
    fn refit_on_harmonized_data_moves_little() {
        // A second pass re-estimates and re-shrinks what the first pass left
        // of the site effects, so it is small but not zero.
        let d = crate::data::synth_dataset(&crate::data::SynthParams {
            n_subjects: 400,
            n_sites: 3,
            feature_dim: 50,
            ..Default::default()
        })
        .unwrap();
        let (sites, cov) = (d.sites(), d.covariates());
        let rms = |a: &Array2<f64>, b: &Array2<f64>| (a - b).mapv(|x| x * x).mean().unwrap().sqrt();
        let mut x = d.features.clone();
        let mut changes = Vec::new();
        for _ in 0..3 {
            let m = combat_fit(&x, &sites, &cov).unwrap();
            let h = combat_apply(&m, &x, &sites, &cov).unwrap();
            changes.push(rms(&h, &x));
            x = h;
        }
        assert!(changes[0] > 0.5, "{changes:?}");
        assert!(changes[1] < 0.02 && changes[1] < 0.02 * changes[0], "{changes:?}");
        assert!(changes[2] < changes[1], "{changes:?}");
    }

    #[test]
    fn model_roundtrip() {
        let y = noise(40, 5, 6);
        let sites: Vec<u32> = (0..40).map(|i| 10 + i % 2).collect();
        let cov = noise(40, 2, 7);
        let m = combat_fit(&y, &sites, &cov).unwrap();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..8], COMBAT_MAGIC);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back.site_table, m.site_table);
        assert_eq!(back.gamma_star, m.gamma_star);
        assert_eq!(back.beta, m.beta);
        assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
    }
}
