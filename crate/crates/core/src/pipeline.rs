//! End-to-end runs: load, QC, split, harmonize, compress, classify and
//! evaluate, writing every report under the output directory.
//!
//! Artifacts are written with a `.partial` suffix and renamed once the whole
//! run succeeds, so a failed run leaves its partial outputs recognizable.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{concatenate, Array2, Axis};

use crate::classifiers::grid::write_score_table;
use crate::classifiers::{fit_model, grid_search, tune_threshold, Family, GridResult, TrainedClassifier};
use crate::config::{Covariate, FitScope, PipelineConfig};
use crate::connectome::{pearson_matrix, vectorize, RoiTimeSeries};
use crate::data::{self, make_split, qc_filter, Dataset, SplitPlan};
use crate::dvae::{self, DvaeModel, EpochLoss};
use crate::error::{Error, Result};
use crate::eval::report::{self, metric_rows, MetricRow};
use crate::eval::{
    bootstrap_ci, compute_metrics, losocv_run, permutation_test, roc_points, BootstrapCI,
    ClassifierConfig, LosocvReport, Metrics, ModelOutcome, PermutationResult,
};
use crate::harmonize::{self, CombatModel};
use crate::rng;

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const GRID_FILE: &str = "grid_scores.csv";
pub const LOSS_FILE: &str = "loss_curve.csv";
pub const MANIFEST_FILE: &str = "manifest.conf";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const COMBAT_FILE: &str = "combat.model";
pub const DVAE_FILE: &str = "dvae.model";

pub fn permutation_file(model: &str) -> String {
    format!("permutation_{model}.csv")
}

/// Loads metadata plus either a feature matrix or per-subject time series.
pub fn load_input(cfg: &PipelineConfig) -> Result<Dataset> {
    let meta = cfg
        .metadata
        .as_ref()
        .ok_or_else(|| Error::config("paths.metadata is not set"))?;
    match (&cfg.features, &cfg.timeseries_dir) {
        (Some(f), _) => data::load_dataset(meta, f),
        (None, Some(dir)) => {
            let records = data::read_metadata(meta)?;
            let features = vectorize_dir(dir, &records.iter().map(|r| r.subject_id.as_str()).collect::<Vec<_>>())?;
            Dataset::new(records, features)
        }
        (None, None) => Err(Error::config("set paths.features or paths.timeseries_dir")),
    }
}

/// Connectivity vectors from `<dir>/<subject_id>.csv` time series (rows are
/// time points, columns ROIs), one row per subject in the given order.
pub fn vectorize_dir(dir: &Path, subjects: &[&str]) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(subjects.len());
    for s in subjects {
        let path = dir.join(format!("{s}.csv"));
        let ts = RoiTimeSeries::new(data::read_matrix(&path)?)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        rows.push(vectorize(&pearson_matrix(&ts)).0.to_vec());
    }
    let width = rows.first().map_or(0, Vec::len);
    if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::shape(format!(
            "subject {} has a different ROI count from subject {}",
            subjects[i], subjects[0]
        )));
    }
    Array2::from_shape_vec((rows.len(), width), rows.concat())
        .map_err(|e| Error::shape(e.to_string()))
}

/// Covariate columns in the order given, sex coded 0/1.
pub fn covariate_matrix(d: &Dataset, covs: &[Covariate]) -> Array2<f64> {
    let mut c = Array2::zeros((d.len(), covs.len()));
    for (i, r) in d.records.iter().enumerate() {
        for (j, cv) in covs.iter().enumerate() {
            c[[i, j]] = match cv {
                Covariate::Age => r.age,
                Covariate::Sex => r.sex.code(),
            };
        }
    }
    c
}

/// Appends covariates: age as a z-score under training statistics, sex as 0/1.
fn append_covariates(
    train: &Dataset,
    xtr: Array2<f64>,
    test: &Dataset,
    xte: Array2<f64>,
    covs: &[Covariate],
) -> (Array2<f64>, Array2<f64>) {
    if covs.is_empty() {
        return (xtr, xte);
    }
    let ages: Vec<f64> = train.records.iter().map(|r| r.age).collect();
    let mean = ages.iter().sum::<f64>() / ages.len() as f64;
    let sd = (ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / ages.len() as f64).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let extra = |d: &Dataset| {
        let mut c = covariate_matrix(d, covs);
        for (j, cv) in covs.iter().enumerate() {
            if *cv == Covariate::Age {
                c.column_mut(j).mapv_inplace(|a| (a - mean) / sd);
            }
        }
        c
    };
    (
        concatenate(Axis(1), &[xtr.view(), extra(train).view()]).expect("row counts match"),
        concatenate(Axis(1), &[xte.view(), extra(test).view()]).expect("row counts match"),
    )
}

/// Everything produced by fitting the pipeline on one train/test split.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub combat: Option<CombatModel>,
    pub dvae: Option<DvaeModel>,
    pub loss_curve: Vec<EpochLoss>,
    pub train_x: Array2<f64>,
    pub test_x: Array2<f64>,
    pub models: Vec<ModelResult>,
    pub classifier_time: Duration,
}

#[derive(Debug, Clone)]
pub struct ModelResult {
    pub family: Family,
    pub grid: GridResult,
    pub classifier: TrainedClassifier,
    pub test_scores: Vec<f64>,
    pub metrics: Metrics,
}

/// Harmonize, compress and classify `train`, evaluating on `test`.
/// `folds` assigns each training row to a cross-validation fold.
pub fn fit_split(
    cfg: &PipelineConfig,
    train: &Dataset,
    test: &Dataset,
    folds: &[usize],
    harmonize_pool: Option<&Dataset>,
) -> Result<SplitOutcome> {
    let (mut xtr, mut xte) = (train.features.clone(), test.features.clone());
    let mut combat = None;
    if cfg.harmonize {
        let fit_on = harmonize_pool.unwrap_or(train);
        let covs = &cfg.harmonize_covariates;
        let m = harmonize::combat_fit(&fit_on.features, &fit_on.sites(), &covariate_matrix(fit_on, covs))
            .map_err(|e| e.in_stage("harmonize"))?;
        xtr = harmonize::combat_apply(&m, &xtr, &train.sites(), &covariate_matrix(train, covs))
            .map_err(|e| e.in_stage("harmonize"))?;
        xte = harmonize::combat_apply(&m, &xte, &test.sites(), &covariate_matrix(test, covs))
            .map_err(|e| {
                let hint = if cfg.harmonize_scope == FitScope::Train {
                    " (harmonize.fit_scope = all fits on every subject)"
                } else {
                    ""
                };
                Error::data(format!("{e}{hint}")).in_stage("harmonize")
            })?;
        combat = Some(m);
    }

    let (mut dvae_model, mut loss_curve) = (None, Vec::new());
    if cfg.use_dvae {
        let mut tc = cfg.dvae.clone();
        tc.seed = rng::derive(cfg.seed, "dvae");
        let (m, curve) = dvae::train(&xtr, &tc).map_err(|e| e.in_stage("dvae"))?;
        xtr = dvae::extract(&m, &xtr).map_err(|e| e.in_stage("extract"))?.to_matrix();
        xte = dvae::extract(&m, &xte).map_err(|e| e.in_stage("extract"))?.to_matrix();
        dvae_model = Some(m);
        loss_curve = curve;
    }
    let (xtr, xte) = append_covariates(train, xtr, test, xte, &cfg.append_covariates);

    let ytr = train.labels();
    let yte = test.labels();
    let started = Instant::now();
    let mut models = Vec::new();
    for &family in &cfg.models {
        let stage = format!("classify {}", family.name());
        let grid = grid_search(&xtr, &ytr, &cfg.grid, family, folds, rng::derive(cfg.seed, "grid"))
            .map_err(|e| e.in_stage(&stage))?;
        let threshold = tune_threshold(&grid.oof_scores, &ytr).map_err(|e| e.in_stage(&stage))?;
        let mut classifier = fit_model(&xtr, &ytr, grid.best_spec(), rng::derive(cfg.seed, "final-fit"))
            .map_err(|e| e.in_stage(&stage))?;
        classifier.set_threshold(threshold);
        let (test_scores, _) = classifier.predict(&xte).map_err(|e| e.in_stage(&stage))?;
        let metrics = compute_metrics(&test_scores, &yte, threshold)
            .map_err(|e| Error::Evaluation(e.to_string()).in_stage(&stage))?;
        log::info!(
            "{}: {} test accuracy {:.3} AUC {:.3}",
            family.name(),
            grid.best_spec().describe(),
            metrics.accuracy,
            metrics.auc
        );
        models.push(ModelResult { family, grid, classifier, test_scores, metrics });
    }
    Ok(SplitOutcome {
        combat,
        dvae: dvae_model,
        loss_curve,
        train_x: xtr,
        test_x: xte,
        models,
        classifier_time: started.elapsed(),
    })
}

/// Summary of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub split: SplitPlan,
    pub outcome: SplitOutcome,
    pub bootstrap: BTreeMap<String, Vec<BootstrapCI>>,
    pub permutation: BTreeMap<String, PermutationResult>,
    pub losocv: Option<LosocvReport>,
    pub timings: Vec<(String, Duration)>,
}

impl RunSummary {
    pub fn model(&self, family: Family) -> Option<&ModelResult> {
        self.outcome.models.iter().find(|m| m.family == family)
    }
}

/// Tracks `.partial` files until the run commits them.
struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    fn partial(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.partial"))
    }

    fn write<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut std::io::BufWriter<fs::File>) -> std::io::Result<()>,
    {
        report::write_file(&self.partial(name), f)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.partial(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn commit(&self) -> Result<()> {
        for name in &self.written {
            fs::rename(self.partial(name), self.dir.join(name))?;
        }
        Ok(())
    }
}

pub fn write_loss_curve<W: Write>(w: &mut W, curve: &[EpochLoss]) -> std::io::Result<()> {
    writeln!(w, "epoch,loss,recon,kl")?;
    for e in curve {
        writeln!(w, "{},{},{},{}", e.epoch, e.loss, e.recon, e.kl)?;
    }
    Ok(())
}

fn write_predictions<W: Write>(w: &mut W, test: &Dataset, models: &[ModelResult]) -> std::io::Result<()> {
    writeln!(w, "model,subject_id,label,score,predicted")?;
    for m in models {
        let t = m.classifier.threshold();
        for (r, s) in test.records.iter().zip(&m.test_scores) {
            writeln!(
                w,
                "{},{},{},{},{}",
                m.family.name(),
                r.subject_id,
                r.label.as_u8(),
                s,
                u8::from(*s > t)
            )?;
        }
    }
    Ok(())
}

/// Runs every configured stage and writes the reports.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    cfg.check_paths()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut art = Artifacts { dir: cfg.output_dir.clone(), written: Vec::new() };
    let mut timings = Vec::new();
    art.write(MANIFEST_FILE, |w| {
        writeln!(w, "# connlatent {}", env!("CARGO_PKG_VERSION"))?;
        w.write_all(cfg.to_text().as_bytes())
    })?;

    let t = Instant::now();
    let d = qc_filter(&load_input(cfg).map_err(|e| e.in_stage("load"))?);
    log::info!("{} subjects after QC, {} features", d.len(), d.feature_dim());
    let split = make_split(&d, cfg.test_fraction, cfg.k, cfg.seed).map_err(|e| e.in_stage("split"))?;
    let train = d.subset(&split.train_indices);
    let test = d.subset(&split.test_indices);
    timings.push(("load".to_string(), t.elapsed()));

    let t = Instant::now();
    let pool = (cfg.harmonize_scope == FitScope::All).then_some(&d);
    let outcome = fit_split(cfg, &train, &test, &split.fold_assignments, pool)?;
    timings.push(("fit".to_string(), t.elapsed()));
    timings.push(("classifier".to_string(), outcome.classifier_time));

    if let Some(m) = &outcome.combat {
        art.write_bytes(COMBAT_FILE, &harmonize::encode_model(m))?;
    }
    if let Some(m) = &outcome.dvae {
        art.write_bytes(DVAE_FILE, &dvae::encode_model(m))?;
        art.write(LOSS_FILE, |w| write_loss_curve(w, &outcome.loss_curve))?;
    }
    let grids: Vec<&GridResult> = outcome.models.iter().map(|m| &m.grid).collect();
    write_score_table(&art.partial(GRID_FILE), &grids)?;
    art.written.push(GRID_FILE.to_string());

    let yte = test.labels();
    let curves: Vec<(String, Vec<(f64, f64)>)> = outcome
        .models
        .iter()
        .map(|m| Ok((m.family.name().to_string(), roc_points(&m.test_scores, &yte)?)))
        .collect::<Result<_>>()?;
    art.write(ROC_FILE, |w| report::write_roc_csv(w, &curves))?;
    art.write(PREDICTIONS_FILE, |w| write_predictions(w, &test, &outcome.models))?;

    let ytr = train.labels();
    let mut boot = BTreeMap::new();
    let mut perm = BTreeMap::new();
    for m in &outcome.models {
        let name = m.family.name().to_string();
        let ccfg = ClassifierConfig {
            spec: m.grid.best_spec(),
            threshold_folds: cfg.k,
            seed: rng::derive(cfg.seed, "final-fit"),
        };
        if cfg.bootstrap {
            let t = Instant::now();
            let cis = bootstrap_ci(
                &outcome.train_x,
                &ytr,
                &outcome.test_x,
                &yte,
                &ccfg,
                cfg.bootstrap_replicates,
                rng::derive(cfg.seed, &format!("bootstrap-{name}")),
                cfg.bootstrap_mode,
            )
            .map_err(|e| e.in_stage(&format!("bootstrap {name}")))?;
            timings.push((format!("bootstrap {name}"), t.elapsed()));
            boot.insert(name.clone(), cis);
        }
        if cfg.permutation {
            let t = Instant::now();
            let x = concatenate(Axis(0), &[outcome.train_x.view(), outcome.test_x.view()])
                .expect("feature widths match");
            let y: Vec<u8> = ytr.iter().chain(&yte).copied().collect();
            let n_tr = ytr.len();
            let tr: Vec<usize> = (0..n_tr).collect();
            let te: Vec<usize> = (n_tr..y.len()).collect();
            let r = permutation_test(
                &x,
                &y,
                &tr,
                &te,
                &ccfg,
                cfg.permutations,
                rng::derive(cfg.seed, &format!("permutation-{name}")),
            )
            .map_err(|e| e.in_stage(&format!("permutation {name}")))?;
            timings.push((format!("permutation {name}"), t.elapsed()));
            art.write(&permutation_file(&name), |w| report::write_histogram_csv(w, &r))?;
            perm.insert(name, r);
        }
    }

    let losocv = if cfg.losocv {
        let t = Instant::now();
        let r = run_losocv(cfg, &d)?;
        timings.push(("losocv".to_string(), t.elapsed()));
        Some(r)
    } else {
        None
    };

    let mut rows: Vec<MetricRow> = Vec::new();
    for m in &outcome.models {
        let name = m.family.name();
        let mut r = metric_rows("holdout", name, &m.metrics, boot.get(name).map(Vec::as_slice));
        if let Some(p) = perm.get(name) {
            r.iter_mut()
                .filter(|row| row.metric == "accuracy")
                .for_each(|row| row.p_value = Some(p.p_value));
        }
        rows.extend(r);
    }
    if let Some(l) = &losocv {
        rows.extend(losocv_rows(l));
    }
    art.write(METRICS_FILE, |w| report::write_metrics_csv(w, &rows))?;
    art.commit()?;

    let mut tw = std::io::BufWriter::new(fs::File::create(cfg.output_dir.join(TIMINGS_FILE))?);
    writeln!(tw, "stage,seconds")?;
    for (s, d) in &timings {
        writeln!(tw, "{s},{}", d.as_secs_f64())?;
    }
    tw.flush()?;

    Ok(RunSummary {
        output_dir: cfg.output_dir.clone(),
        split,
        outcome,
        bootstrap: boot,
        permutation: perm,
        losocv,
        timings,
    })
}

/// Leave-one-site-out over the sites with enough subjects of each class.
///
/// The held-out site never appears in training, so ComBat is fit on every
/// subject here whatever `harmonize.fit_scope` says. It sees features, sites
/// and covariates only, never diagnoses.
pub fn run_losocv(cfg: &PipelineConfig, d: &Dataset) -> Result<LosocvReport> {
    losocv_run(d, cfg.min_per_class, |site, train, test| {
        let folds = data::stratified_folds(
            &train.labels(),
            cfg.k,
            rng::derive(cfg.seed, &format!("losocv-folds-{site}")),
        );
        let out = fit_split(cfg, train, test, &folds, Some(d))?;
        Ok(out
            .models
            .into_iter()
            .map(|m| ModelOutcome { model: m.family.name().to_string(), metrics: m.metrics })
            .collect())
    })
}

pub fn losocv_rows(r: &LosocvReport) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (site, outs) in &r.sites {
        for o in outs {
            rows.extend(metric_rows(&format!("losocv-site-{site}"), &o.model, &o.metrics, None));
        }
    }
    for (model, avg) in &r.averages {
        for (name, v) in avg.named() {
            rows.push(MetricRow::new("losocv-average", model, name, v));
        }
    }
    rows
}
