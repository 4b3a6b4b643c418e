//! Pipeline configuration: flat `key = value` files with dotted keys,
//! presets, `--set` overrides and the `CONNLATENT_SEED` variable.
//!
//! Precedence, lowest first: preset, config file, `CONNLATENT_SEED`,
//! command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::classifiers::{Family, GridSpec};
use crate::dvae::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::BootstrapMode;

pub const SEED_ENV: &str = "CONNLATENT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Covariate {
    Age,
    Sex,
}

impl Covariate {
    pub fn name(self) -> &'static str {
        match self {
            Covariate::Age => "age",
            Covariate::Sex => "sex",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitScope {
    /// Fit on the training split and apply to both splits.
    Train,
    /// Fit on every QC-passing subject.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub metadata: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Directory of per-subject `<subject_id>.csv` ROI time series, used
    /// instead of `features` when set.
    pub timeseries_dir: Option<PathBuf>,
    pub output_dir: PathBuf,

    pub harmonize: bool,
    pub harmonize_covariates: Vec<Covariate>,
    pub harmonize_scope: FitScope,

    pub use_dvae: bool,
    pub dvae: TrainConfig,

    pub models: Vec<Family>,
    pub append_covariates: Vec<Covariate>,
    pub grid: GridSpec,

    pub k: usize,
    pub test_fraction: f64,
    pub bootstrap: bool,
    pub bootstrap_replicates: usize,
    pub bootstrap_mode: BootstrapMode,
    pub permutation: bool,
    pub permutations: usize,
    pub losocv: bool,
    pub min_per_class: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            metadata: None,
            features: None,
            timeseries_dir: None,
            output_dir: PathBuf::from("connlatent-out"),
            harmonize: true,
            harmonize_covariates: vec![Covariate::Age, Covariate::Sex],
            harmonize_scope: FitScope::Train,
            use_dvae: true,
            dvae: TrainConfig::default(),
            models: vec![Family::Svm, Family::Forest],
            append_covariates: Vec::new(),
            grid: GridSpec::default(),
            k: 5,
            test_fraction: 0.2,
            bootstrap: true,
            bootstrap_replicates: 1000,
            bootstrap_mode: BootstrapMode::Refit,
            permutation: true,
            permutations: 1000,
            losocv: false,
            min_per_class: 20,
        }
    }
}

pub const PRESETS: [&str; 3] = ["paper-latent", "paper-raw", "paper-covariates"];

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = PipelineConfig::default();
        match name {
            "paper-latent" => {}
            "paper-raw" => c.use_dvae = false,
            "paper-covariates" => c.append_covariates = vec![Covariate::Age, Covariate::Sex],
            other => {
                return Err(Error::config(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    /// Preset (or defaults), then file, then environment, then overrides.
    pub fn resolve(
        preset: Option<&str>,
        file: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut c = match preset {
            Some(p) => PipelineConfig::preset(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            c.apply_text(&text, &path.display().to_string())?;
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            c.set("seed", &v)
                .map_err(|e| Error::config(format!("{SEED_ENV}: {e}")))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{o}' is not key=value")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, name: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::config(format!("{name}:{}: {msg}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got '{line}'")))?;
            self.set(k.trim(), v.trim()).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let opt_path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "seed" => self.seed = num(key, value)?,
            "paths.metadata" => self.metadata = opt_path(value),
            "paths.features" => self.features = opt_path(value),
            "paths.timeseries_dir" => self.timeseries_dir = opt_path(value),
            "paths.output_dir" => self.output_dir = PathBuf::from(value),
            "harmonize.enabled" => self.harmonize = boolean(key, value)?,
            "harmonize.covariates" => self.harmonize_covariates = covariates(key, value)?,
            "harmonize.fit_scope" => {
                self.harmonize_scope = match value {
                    "train" => FitScope::Train,
                    "all" => FitScope::All,
                    _ => return Err(bad(key, value, "train or all")),
                }
            }
            "dvae.enabled" => self.use_dvae = boolean(key, value)?,
            "dvae.epochs" => self.dvae.epochs = num(key, value)?,
            "dvae.batch_size" => self.dvae.batch_size = num(key, value)?,
            "dvae.learning_rate" => self.dvae.learning_rate = num(key, value)?,
            "dvae.hidden_dims" => self.dvae.hidden_dims = list(key, value)?,
            "dvae.latent_dim" => self.dvae.latent_dim = num(key, value)?,
            "dvae.noise_variance" => self.dvae.noise_variance = num(key, value)?,
            "classify.models" => {
                self.models = split(value)
                    .map(|m| match m {
                        "svm" => Ok(Family::Svm),
                        "rf" => Ok(Family::Forest),
                        _ => Err(bad(key, m, "svm or rf")),
                    })
                    .collect::<Result<_>>()?
            }
            "classify.append_covariates" => self.append_covariates = covariates(key, value)?,
            "grid.svm_c" => self.grid.svm_c = list(key, value)?,
            "grid.svm_gamma" => self.grid.svm_gamma = list(key, value)?,
            "grid.svm_kernels" => {
                let ks: Vec<&str> = split(value).collect();
                if let Some(k) = ks.iter().find(|k| !matches!(**k, "linear" | "rbf")) {
                    return Err(bad(key, k, "linear or rbf"));
                }
                self.grid.svm_linear = ks.contains(&"linear");
                self.grid.svm_rbf = ks.contains(&"rbf");
            }
            "grid.rf_n_trees" => self.grid.rf_n_trees = list(key, value)?,
            "grid.rf_max_depth" => self.grid.rf_max_depth = list(key, value)?,
            "eval.k" => self.k = num(key, value)?,
            "eval.test_fraction" => self.test_fraction = num(key, value)?,
            "eval.bootstrap" => self.bootstrap = boolean(key, value)?,
            "eval.bootstrap_replicates" => self.bootstrap_replicates = num(key, value)?,
            "eval.bootstrap_mode" => {
                self.bootstrap_mode = match value {
                    "refit" => BootstrapMode::Refit,
                    "test" => BootstrapMode::TestResample,
                    _ => return Err(bad(key, value, "refit or test")),
                }
            }
            "eval.permutation" => self.permutation = boolean(key, value)?,
            "eval.permutations" => self.permutations = num(key, value)?,
            "eval.losocv" => self.losocv = boolean(key, value)?,
            "eval.min_per_class" => self.min_per_class = num(key, value)?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("eval.k must be at least 2"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("eval.test_fraction must lie in (0, 1)"));
        }
        if self.bootstrap && self.bootstrap_replicates < 100 {
            return Err(Error::config("eval.bootstrap_replicates must be at least 100"));
        }
        if self.permutation && self.permutations < 1 {
            return Err(Error::config("eval.permutations must be at least 1"));
        }
        if self.models.is_empty() {
            return Err(Error::config("classify.models must name at least one model"));
        }
        let d = &self.dvae;
        if d.epochs < 1 || d.batch_size < 1 || d.latent_dim < 1 {
            return Err(Error::config("dvae.epochs, dvae.batch_size and dvae.latent_dim must be positive"));
        }
        if !(d.learning_rate > 0.0 && d.learning_rate.is_finite()) {
            return Err(Error::config("dvae.learning_rate must be positive"));
        }
        if !(d.noise_variance >= 0.0 && d.noise_variance.is_finite()) {
            return Err(Error::config("dvae.noise_variance must be nonnegative"));
        }
        if d.hidden_dims.contains(&0) {
            return Err(Error::config("dvae.hidden_dims must be positive"));
        }
        self.grid.validate()
    }

    /// Checks that every configured input path exists.
    pub fn check_paths(&self) -> Result<()> {
        for (key, p) in [
            ("paths.metadata", &self.metadata),
            ("paths.features", &self.features),
            ("paths.timeseries_dir", &self.timeseries_dir),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::config(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, loadable by [`apply_text`].
    ///
    /// [`apply_text`]: PipelineConfig::apply_text
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let join = |v: Vec<String>| v.join(",");
        let covs = |c: &[Covariate]| join(c.iter().map(|c| c.name().to_string()).collect());
        let mut kernels = Vec::new();
        if self.grid.svm_linear {
            kernels.push("linear".to_string());
        }
        if self.grid.svm_rbf {
            kernels.push("rbf".to_string());
        }
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("paths.metadata", path(&self.metadata)),
            ("paths.features", path(&self.features)),
            ("paths.timeseries_dir", path(&self.timeseries_dir)),
            ("paths.output_dir", self.output_dir.display().to_string()),
            ("harmonize.enabled", self.harmonize.to_string()),
            ("harmonize.covariates", covs(&self.harmonize_covariates)),
            (
                "harmonize.fit_scope",
                match self.harmonize_scope {
                    FitScope::Train => "train",
                    FitScope::All => "all",
                }
                .into(),
            ),
            ("dvae.enabled", self.use_dvae.to_string()),
            ("dvae.epochs", self.dvae.epochs.to_string()),
            ("dvae.batch_size", self.dvae.batch_size.to_string()),
            ("dvae.learning_rate", self.dvae.learning_rate.to_string()),
            ("dvae.hidden_dims", join(self.dvae.hidden_dims.iter().map(|v| v.to_string()).collect())),
            ("dvae.latent_dim", self.dvae.latent_dim.to_string()),
            ("dvae.noise_variance", self.dvae.noise_variance.to_string()),
            ("classify.models", join(self.models.iter().map(|m| m.name().to_string()).collect())),
            ("classify.append_covariates", covs(&self.append_covariates)),
            ("grid.svm_c", join(self.grid.svm_c.iter().map(|v| v.to_string()).collect())),
            ("grid.svm_gamma", join(self.grid.svm_gamma.iter().map(|v| v.to_string()).collect())),
            ("grid.svm_kernels", join(kernels)),
            ("grid.rf_n_trees", join(self.grid.rf_n_trees.iter().map(|v| v.to_string()).collect())),
            ("grid.rf_max_depth", join(self.grid.rf_max_depth.iter().map(|v| v.to_string()).collect())),
            ("eval.k", self.k.to_string()),
            ("eval.test_fraction", self.test_fraction.to_string()),
            ("eval.bootstrap", self.bootstrap.to_string()),
            ("eval.bootstrap_replicates", self.bootstrap_replicates.to_string()),
            (
                "eval.bootstrap_mode",
                match self.bootstrap_mode {
                    BootstrapMode::Refit => "refit",
                    BootstrapMode::TestResample => "test",
                }
                .into(),
            ),
            ("eval.permutation", self.permutation.to_string()),
            ("eval.permutations", self.permutations.to_string()),
            ("eval.losocv", self.losocv.to_string()),
            ("eval.min_per_class", self.min_per_class.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::config(format!("{key}: '{value}' is not valid (expected {expected})"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn split(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    split(value).map(|v| num(key, v)).collect()
}

fn covariates(key: &str, value: &str) -> Result<Vec<Covariate>> {
    let mut out = Vec::new();
    for c in split(value) {
        let c = match c {
            "age" => Covariate::Age,
            "sex" => Covariate::Sex,
            _ => return Err(bad(key, c, "age and/or sex")),
        };
        if !out.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}
