use std::fs;

use connlatent::classifiers::Family;
use connlatent::config::PipelineConfig;
use connlatent::connectome::feature_len;
use connlatent::data::{synth_dataset, write_matrix_binary, write_matrix_csv, write_metadata, SynthParams};
use connlatent::pipeline::{run_pipeline, METRICS_FILE};
use connlatent::rng;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

fn fast(c: &mut PipelineConfig) {
    c.bootstrap = false;
    c.permutation = false;
    c.grid.svm_c = vec![1.0, 10.0];
    c.grid.svm_gamma = vec![0.1];
    c.grid.rf_n_trees = vec![10];
    c.grid.rf_max_depth = vec![2, 4];
}

#[test]
fn raw_preset_feeds_full_connectivity_vectors() {
    let t = tempfile::tempdir().unwrap();
    let d = synth_dataset(&SynthParams { n_subjects: 60, n_sites: 2, feature_dim: 1, signal_dim: 0, ..Default::default() }).unwrap();
    write_metadata(&t.path().join("meta.csv"), &d.records).unwrap();
    let ts = t.path().join("ts");
    fs::create_dir(&ts).unwrap();
    let rois = 9;
    let mut r = rng::seeded(3);
    for rec in &d.records {
        let m = Array2::from_shape_simple_fn((30, rois), || r.sample::<f64, _>(StandardNormal));
        write_matrix_csv(&ts.join(format!("{}.csv", rec.subject_id)), &m).unwrap();
    }
    let mut c = PipelineConfig::preset("paper-raw").unwrap();
    fast(&mut c);
    c.metadata = Some(t.path().join("meta.csv"));
    c.timeseries_dir = Some(ts);
    c.output_dir = t.path().join("out");
    let s = run_pipeline(&c).unwrap();
    assert_eq!(s.outcome.train_x.ncols(), feature_len(rois));
    assert_eq!(s.outcome.train_x.ncols(), rois * (rois + 1) / 2);
}

#[test]
fn latent_preset_reports_both_models() {
    let t = tempfile::tempdir().unwrap();
    let d = synth_dataset(&SynthParams {
        n_subjects: 150,
        n_sites: 3,
        feature_dim: 40,
        signal_dim: 5,
        site_shift: 1.0,
        effect_size: 1.5,
        seed: 2,
    })
    .unwrap();
    write_metadata(&t.path().join("meta.csv"), &d.records).unwrap();
    write_matrix_binary(&t.path().join("x.bin"), &d.features).unwrap();
    let mut c = PipelineConfig::preset("paper-latent").unwrap();
    fast(&mut c);
    c.dvae.epochs = 10;
    c.dvae.hidden_dims = vec![32];
    c.metadata = Some(t.path().join("meta.csv"));
    c.features = Some(t.path().join("x.bin"));
    c.output_dir = t.path().join("out");
    let s = run_pipeline(&c).unwrap();
    assert_eq!(s.outcome.train_x.ncols(), 10);
    assert!(s.model(Family::Svm).is_some() && s.model(Family::Forest).is_some());
    let text = fs::read_to_string(c.output_dir.join(METRICS_FILE)).unwrap();
    for model in ["svm", "rf"] {
        for metric in ["sensitivity", "specificity", "accuracy", "auc"] {
            assert!(text.contains(&format!("holdout,{model},{metric},")), "{model} {metric}");
        }
    }

    let mut cov = c.clone();
    cov.append_covariates = PipelineConfig::preset("paper-covariates").unwrap().append_covariates;
    cov.output_dir = t.path().join("cov");
    let s = run_pipeline(&cov).unwrap();
    assert_eq!(s.outcome.train_x.ncols(), 12);
    let age = s.outcome.train_x.column(10);
    assert!(age.mean().unwrap().abs() < 1e-9);
    assert!(s.outcome.train_x.column(11).iter().all(|&v| v == 0.0 || v == 1.0));
}
