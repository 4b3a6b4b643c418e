//! Leave-one-site-out cross-validation.

use std::collections::BTreeMap;

use crate::data::{Dataset, Label, SubjectRecord};
use crate::error::{Error, Result};

use super::metrics::Metrics;

/// Sites with strictly more than `min_per_class` subjects in each class,
/// ascending.
pub fn losocv_sites(records: &[SubjectRecord], min_per_class: usize) -> Vec<u32> {
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for r in records {
        let c = counts.entry(r.site_id).or_default();
        match r.label {
            Label::Control => c.0 += 1,
            Label::Asd => c.1 += 1,
        }
    }
    counts
        .into_iter()
        .filter(|(_, (hc, asd))| *hc > min_per_class && *asd > min_per_class)
        .map(|(s, _)| s)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutcome {
    pub model: String,
    pub metrics: Metrics,
}

/// Unweighted means of per-site metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
}

impl MeanMetrics {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("accuracy", self.accuracy),
            ("auc", self.auc),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosocvReport {
    pub sites: Vec<(u32, Vec<ModelOutcome>)>,
    /// Per model, in first-seen order.
    pub averages: Vec<(String, MeanMetrics)>,
}

/// Runs `pipeline(site, train, test)` once per qualifying site, training on
/// every other site and testing on the held-out one.
pub fn losocv_run<F>(d: &Dataset, min_per_class: usize, mut pipeline: F) -> Result<LosocvReport>
where
    F: FnMut(u32, &Dataset, &Dataset) -> Result<Vec<ModelOutcome>>,
{
    let sites = losocv_sites(&d.records, min_per_class);
    if sites.is_empty() {
        return Err(Error::config(format!(
            "no site has more than {min_per_class} subjects of each class"
        )));
    }
    let mut per_site = Vec::with_capacity(sites.len());
    for &site in &sites {
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..d.len()).partition(|&i| d.records[i].site_id == site);
        log::info!("LOSOCV: holding out site {site} ({} subjects)", test.len());
        let outcomes = pipeline(site, &d.subset(&train), &d.subset(&test))
            .map_err(|e| e.in_stage(&format!("losocv site {site}")))?;
        per_site.push((site, outcomes));
    }
    Ok(LosocvReport { averages: average(&per_site), sites: per_site })
}

fn average(per_site: &[(u32, Vec<ModelOutcome>)]) -> Vec<(String, MeanMetrics)> {
    let mut names: Vec<String> = Vec::new();
    for (_, outs) in per_site {
        for o in outs {
            if !names.contains(&o.model) {
                names.push(o.model.clone());
            }
        }
    }
    names
        .into_iter()
        .map(|name| {
            let ms: Vec<&Metrics> = per_site
                .iter()
                .flat_map(|(_, outs)| outs.iter().filter(|o| o.model == name).map(|o| &o.metrics))
                .collect();
            let n = ms.len() as f64;
            let mean = |f: fn(&Metrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / n;
            let avg = MeanMetrics {
                accuracy: mean(|m| m.accuracy),
                sensitivity: mean(|m| m.sensitivity),
                specificity: mean(|m| m.specificity),
                auc: mean(|m| m.auc),
            };
            (name, avg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sex;
    use crate::eval::metrics::compute_metrics;
    use ndarray::Array2;

    fn rec(site: u32, label: Label) -> SubjectRecord {
        SubjectRecord {
            subject_id: "s".into(),
            site_id: site,
            age: 20.0,
            sex: Sex::Male,
            label,
            qc_pass: true,
        }
    }

    fn site(site: u32, hc: usize, asd: usize) -> Vec<SubjectRecord> {
        let mut v = vec![rec(site, Label::Control); hc];
        v.extend(vec![rec(site, Label::Asd); asd]);
        v
    }

    #[test]
    fn strict_inequality() {
        let mut r = site(1, 20, 20);
        r.extend(site(2, 21, 21));
        r.extend(site(3, 40, 5));
        assert_eq!(losocv_sites(&r, 20), vec![2]);
        assert!(losocv_sites(&[], 20).is_empty());
    }

    #[test]
    fn single_site_average_equals_site() {
        let mut r = site(1, 3, 3);
        r.extend(site(2, 1, 1));
        let d = Dataset::new(r, Array2::zeros((8, 1))).unwrap();
        let rep = losocv_run(&d, 2, |_, _, test| {
            let y = test.labels();
            let s: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
            Ok(vec![ModelOutcome { model: "m".into(), metrics: compute_metrics(&s, &y, 2.5)? }])
        })
        .unwrap();
        assert_eq!(rep.sites.len(), 1);
        let m = rep.sites[0].1[0].metrics;
        let a = rep.averages[0].1;
        assert_eq!((a.accuracy, a.auc), (m.accuracy, m.auc));
    }

    #[test]
    fn no_qualifying_site_is_config_error() {
        let d = Dataset::new(site(1, 2, 2), Array2::zeros((4, 1))).unwrap();
        let r = losocv_run(&d, 20, |_, _, _| Ok(vec![]));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
