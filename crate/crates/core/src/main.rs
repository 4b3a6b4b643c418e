use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use connlatent::classifiers::tune_threshold;
use connlatent::config::PipelineConfig;
use connlatent::data::{self, SynthParams};
use connlatent::eval::report::{self, metric_rows, MetricRow};
use connlatent::eval::{compute_metrics, roc_points};
use connlatent::pipeline::{self, RunSummary};
use connlatent::{dvae, harmonize, plots, rng, Error, Result};
use ndarray::Array2;

#[derive(Parser)]
#[command(name = "connlatent", version, about = "Connectivity harmonization, DVAE compression and classification")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset applied before the config file.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Inputs {
    /// Subject metadata CSV.
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Feature matrix (binary or CSV), one row per metadata record.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Directory of `<subject_id>.csv` ROI time series, instead of --features.
    #[arg(long)]
    timeseries_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Inputs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |k: &str, p: &Option<PathBuf>| {
            if let Some(p) = p {
                o.push(format!("{k}={}", p.display()));
            }
        };
        push("paths.metadata", &self.metadata);
        push("paths.features", &self.features);
        push("paths.timeseries_dir", &self.timeseries_dir);
        push("paths.output_dir", &self.out);
        o
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-site dataset with a planted group effect.
    Synth {
        #[arg(long, default_value_t = 400)]
        n_subjects: usize,
        #[arg(long, default_value_t = 5)]
        n_sites: usize,
        #[arg(long, default_value_t = 1000)]
        feature_dim: usize,
        #[arg(long, default_value_t = 10)]
        signal_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        site_shift: f64,
        #[arg(long, default_value_t = 1.0)]
        effect_size: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving metadata.csv and features.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pearson connectivity vectors from per-subject ROI time series.
    Vectorize {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        timeseries_dir: PathBuf,
        /// Output matrix; `.csv` writes text, anything else binary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit ComBat (or apply a saved model) and write harmonized features.
    Harmonize {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to save the fitted model.
        #[arg(long, conflicts_with = "apply")]
        model: Option<PathBuf>,
        /// Apply this saved model instead of fitting.
        #[arg(long)]
        apply: Option<PathBuf>,
    },
    /// Train the denoising VAE on a feature matrix.
    TrainDvae {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
    },
    /// Latent means and log-variances from a trained DVAE.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid search, threshold tuning and hold-out metrics on features as given.
    Classify(Inputs),
    /// Metrics and ROC points from a CSV with `label` and `score` columns.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// Fixed decision threshold; tuned on the scores when omitted.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-site-out validation of the configured pipeline.
    Losocv(Inputs),
    /// Hold-out run with the label-permutation test only.
    Permtest(Inputs),
    /// Hold-out run with bootstrap confidence intervals only.
    Bootstrap(Inputs),
    /// The full configured pipeline.
    Run(Inputs),
    /// SVG charts from the CSVs in a run directory.
    Plots {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn config(cli: &Cli, extra: &[String]) -> Result<PipelineConfig> {
    let mut overrides = cli.overrides.clone();
    overrides.extend_from_slice(extra);
    PipelineConfig::resolve(cli.preset.as_deref(), cli.config.as_deref(), &overrides)
}

fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        data::write_matrix_csv(path, m)
    } else {
        data::write_matrix_binary(path, m)
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { n_subjects, n_sites, feature_dim, signal_dim, site_shift, effect_size, seed, out } => {
            let d = data::synth_dataset(&SynthParams {
                n_subjects: *n_subjects,
                n_sites: *n_sites,
                feature_dim: *feature_dim,
                signal_dim: *signal_dim,
                site_shift: *site_shift,
                effect_size: *effect_size,
                seed: *seed,
            })?;
            std::fs::create_dir_all(out)?;
            data::write_metadata(&out.join("metadata.csv"), &d.records)?;
            data::write_matrix_binary(&out.join("features.bin"), &d.features)?;
            println!("wrote {} subjects x {} features to {}", d.len(), d.feature_dim(), out.display());
        }
        Command::Vectorize { metadata, timeseries_dir, out } => {
            let records = data::read_metadata(metadata)?;
            let ids: Vec<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
            let m = pipeline::vectorize_dir(timeseries_dir, &ids)?;
            write_matrix(out, &m)?;
            println!("wrote {} x {} connectivity vectors to {}", m.nrows(), m.ncols(), out.display());
        }
        Command::Harmonize { metadata, features, out, model, apply } => {
            let cfg = config(cli, &[])?;
            let d = data::qc_filter(&data::load_dataset(metadata, features)?);
            let cov = pipeline::covariate_matrix(&d, &cfg.harmonize_covariates);
            let m = match apply {
                Some(p) => harmonize::load_model(p)?,
                None => harmonize::combat_fit(&d.features, &d.sites(), &cov)?,
            };
            let y = harmonize::combat_apply(&m, &d.features, &d.sites(), &cov)?;
            write_matrix(out, &y)?;
            if let Some(p) = model {
                harmonize::save_model(p, &m)?;
            }
            println!("harmonized {} subjects", d.len());
        }
        Command::TrainDvae { features, model, loss_curve } => {
            let mut cfg = config(cli, &[])?;
            cfg.dvae.seed = rng::derive(cfg.seed, "dvae");
            let x = data::read_matrix(features)?;
            let (m, curve) = dvae::train(&x, &cfg.dvae)?;
            dvae::save_model(model, &m)?;
            if let Some(p) = loss_curve {
                report::write_file(p, |w| pipeline::write_loss_curve(w, &curve))?;
            }
            if let Some(last) = curve.last() {
                println!("trained {} epochs, final loss {:.4}", curve.len(), last.loss);
            }
        }
        Command::Extract { model, features, out } => {
            let m = dvae::load_model(model)?;
            let z = dvae::extract(&m, &data::read_matrix(features)?)?.to_matrix();
            write_matrix(out, &z)?;
            println!("wrote {} x {} latent features to {}", z.nrows(), z.ncols(), out.display());
        }
        Command::Classify(inputs) => {
            let mut extra = inputs.overrides();
            extra.extend(
                ["harmonize.enabled=false", "dvae.enabled=false", "eval.bootstrap=false", "eval.permutation=false", "eval.losocv=false"]
                    .map(String::from),
            );
            summarize(&pipeline::run_pipeline(&config(cli, &extra)?)?);
        }
        Command::Evaluate { scores, threshold, out } => evaluate(scores, *threshold, out)?,
        Command::Losocv(inputs) => {
            let cfg = config(cli, &inputs.overrides())?;
            let d = data::qc_filter(&pipeline::load_input(&cfg)?);
            let r = pipeline::run_losocv(&cfg, &d)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let rows = pipeline::losocv_rows(&r);
            report::write_file(&cfg.output_dir.join(pipeline::METRICS_FILE), |w| report::write_metrics_csv(w, &rows))?;
            for (model, avg) in &r.averages {
                println!("{model}: {}", fmt_named(&avg.named()));
            }
        }
        Command::Permtest(inputs) | Command::Bootstrap(inputs) => {
            let perm = matches!(cli.command, Command::Permtest(_));
            let mut extra = inputs.overrides();
            extra.push(format!("eval.permutation={perm}"));
            extra.push(format!("eval.bootstrap={}", !perm));
            extra.push("eval.losocv=false".into());
            summarize(&pipeline::run_pipeline(&config(cli, &extra)?)?);
        }
        Command::Run(inputs) => summarize(&pipeline::run_pipeline(&config(cli, &inputs.overrides())?)?),
        Command::Plots { dir } => {
            for p in plots::emit_plots(dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn fmt_named(v: &[(&str, f64)]) -> String {
    v.iter().map(|(k, x)| format!("{k} {x:.3}")).collect::<Vec<_>>().join(", ")
}

fn summarize(s: &RunSummary) {
    for m in &s.outcome.models {
        let name = m.family.name();
        println!("{name}: {} | {}", m.grid.best_spec().describe(), fmt_named(&m.metrics.named()));
        if let Some(cis) = s.bootstrap.get(name) {
            for c in cis {
                println!("  {} 95% CI [{:.3}, {:.3}]", c.metric, c.lower, c.upper);
            }
        }
        if let Some(p) = s.permutation.get(name) {
            println!("  permutation p = {:.4}", p.p_value);
        }
    }
    if let Some(l) = &s.losocv {
        for (model, avg) in &l.averages {
            println!("losocv {model}: {}", fmt_named(&avg.named()));
        }
    }
    println!("reports in {}", s.output_dir.display());
}

fn evaluate(path: &Path, threshold: Option<f64>, out: &Path) -> Result<()> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let (li, si) = match (col("label"), col("score")) {
        (Some(l), Some(s)) => (l, s),
        _ => return Err(Error::Data(format!("{}: needs label and score columns", path.display()))),
    };
    let mi = col("model");
    let mut groups: BTreeMap<String, (Vec<u8>, Vec<f64>)> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let bad = |what: &str| Error::Parse { path: path.display().to_string(), line: i + 2, msg: format!("bad {what}") };
        let label: u8 = rec.get(li).and_then(|v| v.trim().parse().ok()).filter(|v| *v <= 1).ok_or_else(|| bad("label"))?;
        let score: f64 = rec.get(si).and_then(|v| v.trim().parse().ok()).ok_or_else(|| bad("score"))?;
        let model = mi.and_then(|m| rec.get(m)).unwrap_or("model").to_string();
        let g = groups.entry(model).or_default();
        g.0.push(label);
        g.1.push(score);
    }
    std::fs::create_dir_all(out)?;
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut curves = Vec::new();
    for (model, (y, s)) in &groups {
        let t = match threshold {
            Some(t) => t,
            None => {
                log::warn!("{model}: tuning the threshold on the evaluated scores themselves");
                tune_threshold(s, y)?
            }
        };
        let m = compute_metrics(s, y, t)?;
        println!("{model}: threshold {t:.4} | {}", fmt_named(&m.named()));
        rows.extend(metric_rows("scores", model, &m, None));
        curves.push((model.clone(), roc_points(s, y)?));
    }
    report::write_file(&out.join(pipeline::METRICS_FILE), |w| report::write_metrics_csv(w, &rows))?;
    report::write_file(&out.join(pipeline::ROC_FILE), |w| report::write_roc_csv(w, &curves))?;
    Ok(())
}
