//! CSV writers for metric reports, ROC points and permutation histograms.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

use super::bootstrap::BootstrapCI;
use super::metrics::Metrics;
use super::permutation::PermutationResult;

pub const METRICS_HEADER: &str = "protocol,model,metric,value,ci_lower,ci_upper,p_value";
pub const ROC_HEADER: &str = "model,fpr,tpr";
pub const HISTOGRAM_HEADER: &str = "iteration,metric_value";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub protocol: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
}

impl MetricRow {
    pub fn new(protocol: &str, model: &str, metric: &str, value: f64) -> Self {
        MetricRow {
            protocol: protocol.into(),
            model: model.into(),
            metric: metric.into(),
            value,
            ci: None,
            p_value: None,
        }
    }
}

/// One row per metric of `m`, with bootstrap intervals attached where given.
pub fn metric_rows(protocol: &str, model: &str, m: &Metrics, cis: Option<&[BootstrapCI]>) -> Vec<MetricRow> {
    m.named()
        .iter()
        .map(|&(name, v)| {
            let mut row = MetricRow::new(protocol, model, name, v);
            row.ci = cis
                .and_then(|c| c.iter().find(|c| c.metric == name))
                .map(|c| (c.lower, c.upper));
            row
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.protocol,
            r.model,
            r.metric,
            r.value,
            opt(r.ci.map(|c| c.0)),
            opt(r.ci.map(|c| c.1)),
            opt(r.p_value)
        )?;
    }
    Ok(())
}

pub fn write_roc_csv<W: Write>(w: &mut W, curves: &[(String, Vec<(f64, f64)>)]) -> std::io::Result<()> {
    writeln!(w, "{ROC_HEADER}")?;
    for (model, pts) in curves {
        for (fpr, tpr) in pts {
            writeln!(w, "{model},{fpr},{tpr}")?;
        }
    }
    Ok(())
}

/// Permuted values by iteration, then an `observed` marker row.
pub fn write_histogram_csv<W: Write>(w: &mut W, r: &PermutationResult) -> std::io::Result<()> {
    writeln!(w, "{HISTOGRAM_HEADER}")?;
    for (i, v) in r.permuted.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    writeln!(w, "observed,{}", r.observed)
}

/// Runs `f` against a buffered file at `path`.
pub fn write_file<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_has_marker_row() {
        let r = PermutationResult { observed: 0.7, permuted: vec![0.5, 0.6], p_value: 1.0 / 3.0 };
        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, &r).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "iteration,metric_value\n0,0.5\n1,0.6\nobserved,0.7\n");
    }

    #[test]
    fn metrics_rows_leave_missing_fields_empty() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[MetricRow::new("holdout", "svm", "auc", 0.9)]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().nth(1), Some("holdout,svm,auc,0.9,,,"));
    }
}
