//! Subject metadata, connectivity feature matrices, QC filtering, stratified
//! splits, and a synthetic multi-site generator with planted signal.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

/// Magic prefix of the binary feature-matrix format.
pub const FEATURE_MAGIC: &[u8; 8] = b"CONNLAT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    /// Numeric code used for covariates: male = 0, female = 1.
    pub fn code(self) -> f64 {
        match self {
            Sex::Male => 0.0,
            Sex::Female => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Control,
    Asd,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Control => 0,
            Label::Asd => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Control),
            1 => Some(Label::Asd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub site_id: u32,
    pub age: f64,
    pub sex: Sex,
    pub label: Label,
    pub qc_pass: bool,
}

/// Subjects with their connectivity features, one row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<SubjectRecord>,
    pub features: Array2<f64>,
}

impl Dataset {
    pub fn new(records: Vec<SubjectRecord>, features: Array2<f64>) -> Result<Self> {
        let d = Dataset { records, features };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.records.len() {
            return Err(Error::shape(format!(
                "{} metadata rows but {} feature rows",
                self.records.len(),
                self.features.nrows()
            )));
        }
        for (rec, row) in self.records.iter().zip(self.features.rows()) {
            if !(rec.age > 0.0 && rec.age < 120.0) {
                return Err(Error::data(format!(
                    "subject {}: age {} outside (0, 120)",
                    rec.subject_id, rec.age
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "subject {}: non-finite feature value",
                    rec.subject_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label.as_u8()).collect()
    }

    pub fn sites(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.site_id).collect()
    }

    /// Sorted site table.
    pub fn site_table(&self) -> Vec<u32> {
        let mut s = self.sites();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Covariate matrix with columns (age, sex code).
    pub fn covariates(&self) -> Array2<f64> {
        let mut c = Array2::zeros((self.len(), 2));
        for (i, r) in self.records.iter().enumerate() {
            c[[i, 0]] = r.age;
            c[[i, 1]] = r.sex.code();
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            features: self.features.select(Axis(0), indices),
        }
    }

    pub fn with_features(&self, features: Array2<f64>) -> Result<Dataset> {
        Dataset::new(self.records.clone(), features)
    }
}

/// Train/test partition with stratified fold ids over the training part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Fold id for each entry of `train_indices`, in `[0, k)`.
    pub fold_assignments: Vec<usize>,
    pub k: usize,
}

// ---------------------------------------------------------------------------
// Loading

pub fn load_dataset(metadata_path: &Path, features_path: &Path) -> Result<Dataset> {
    let records = read_metadata(metadata_path)?;
    let features = read_matrix(features_path)?;
    if features.nrows() != records.len() {
        return Err(Error::shape(format!(
            "{} has {} rows but {} lists {} subjects",
            features_path.display(),
            features.nrows(),
            metadata_path.display(),
            records.len()
        )));
    }
    Dataset::new(records, features)
}

const METADATA_HEADER: [&str; 6] = ["subject_id", "site_id", "age", "sex", "label", "qc_pass"];

pub fn read_metadata(path: &Path) -> Result<Vec<SubjectRecord>> {
    let file = File::open(path)?;
    parse_metadata(file, &path.display().to_string())
}

pub fn parse_metadata<R: Read>(input: R, name: &str) -> Result<Vec<SubjectRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let perr = |line: usize, msg: String| Error::Parse {
        path: name.to_string(),
        line,
        msg,
    };
    let header = reader
        .headers()
        .map_err(|e| perr(1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != METADATA_HEADER {
        return Err(perr(
            1,
            format!("expected header `{}`", METADATA_HEADER.join(",")),
        ));
    }

    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let fallback_line = i + 2;
        let row = row.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(fallback_line);
            perr(line, e.to_string())
        })?;
        let line = row
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(fallback_line);
        if row.len() != 6 {
            return Err(perr(line, format!("expected 6 fields, found {}", row.len())));
        }
        let site_id = row[1]
            .parse::<u32>()
            .map_err(|_| perr(line, format!("bad site_id `{}`", &row[1])))?;
        let age = row[2]
            .parse::<f64>()
            .map_err(|_| perr(line, format!("bad age `{}`", &row[2])))?;
        if !(age > 0.0 && age < 120.0) {
            return Err(perr(line, format!("age {age} outside (0, 120)")));
        }
        let sex = match &row[3] {
            "M" => Sex::Male,
            "F" => Sex::Female,
            other => return Err(perr(line, format!("bad sex `{other}` (expected M or F)"))),
        };
        let label = row[4]
            .parse::<u8>()
            .ok()
            .and_then(Label::from_u8)
            .ok_or_else(|| perr(line, format!("bad label `{}` (expected 0 or 1)", &row[4])))?;
        let qc_pass = match &row[5] {
            "1" => true,
            "0" => false,
            other => return Err(perr(line, format!("bad qc_pass `{other}` (expected 0 or 1)"))),
        };
        out.push(SubjectRecord {
            subject_id: row[0].to_string(),
            site_id,
            age,
            sex,
            label,
            qc_pass,
        });
    }
    Ok(out)
}

pub fn write_metadata(path: &Path, records: &[SubjectRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", METADATA_HEADER.join(","))?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.subject_id,
            r.site_id,
            r.age,
            if r.sex == Sex::Male { "M" } else { "F" },
            r.label.as_u8(),
            u8::from(r.qc_pass)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Read a matrix in either the binary `CONNLAT1` format or headerless CSV,
/// detected by the leading magic bytes.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let name = path.display().to_string();
    if bytes.starts_with(FEATURE_MAGIC) {
        decode_binary_matrix(&bytes, &name)
    } else {
        parse_csv_matrix(&bytes, &name)
    }
}

fn decode_binary_matrix(bytes: &[u8], name: &str) -> Result<Array2<f64>> {
    if bytes.len() < 24 {
        return Err(Error::shape(format!("{name}: truncated header")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = &bytes[24..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::shape(format!("{name}: dimensions overflow")))?;
    if body.len() != expected {
        return Err(Error::shape(format!(
            "{name}: header says {rows}x{cols} ({expected} bytes) but payload is {} bytes",
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

fn parse_csv_matrix(bytes: &[u8], name: &str) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(bytes);
    let mut data = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0usize;
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::shape(format!(
                    "{name}:{line}: expected {c} columns, found {}",
                    row.len()
                )))
            }
            _ => {}
        }
        for field in row.iter() {
            let v = field.parse::<f64>().map_err(|_| Error::Parse {
                path: name.to_string(),
                line,
                msg: format!("bad number `{field}`"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Ok(Array2::from_shape_vec((rows, cols), data).expect("rows are rectangular"))
}

/// Write the binary format (values narrowed to f32).
pub fn write_matrix_binary(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Filtering and splitting

/// Keep QC-passing subjects, preserving order.
pub fn qc_filter(d: &Dataset) -> Dataset {
    let keep: Vec<usize> = d
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.qc_pass)
        .map(|(i, _)| i)
        .collect();
    d.subset(&keep)
}

/// Label-stratified train/test split of the QC-passing subjects, plus
/// label-stratified fold ids over the training part.
pub fn make_split(d: &Dataset, test_fraction: f64, k: usize, seed: u64) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if k == 0 {
        return Err(Error::config("fold count must be positive"));
    }
    let eligible: Vec<usize> = (0..d.len()).filter(|&i| d.records[i].qc_pass).collect();
    if eligible.is_empty() {
        return Err(Error::config("cannot split an empty dataset"));
    }
    let labels: Vec<u8> = eligible.iter().map(|&i| d.records[i].label.as_u8()).collect();
    let (test_local, train_local) = stratified_holdout(&labels, test_fraction, seed);
    let mut test_indices: Vec<usize> = test_local.iter().map(|&i| eligible[i]).collect();
    let mut train_indices: Vec<usize> = train_local.iter().map(|&i| eligible[i]).collect();
    test_indices.sort_unstable();
    train_indices.sort_unstable();

    if k > train_indices.len() {
        return Err(Error::config(format!(
            "{k} folds requested but the training set has {} subjects",
            train_indices.len()
        )));
    }
    let train_labels: Vec<u8> = train_indices
        .iter()
        .map(|&i| d.records[i].label.as_u8())
        .collect();
    let fold_assignments = stratified_folds(&train_labels, k, rng::derive(seed, "folds"));
    Ok(SplitPlan {
        train_indices,
        test_indices,
        fold_assignments,
        k,
    })
}

/// Returns (test, train) positions into `labels`.
fn stratified_holdout(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    let mut rng = rng::seeded(seed);
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let n_test = ((n as f64) * fraction).round() as usize;
    let n_pos = by_class.get(&1).map_or(0, Vec::len);
    let n_test_pos = ((n_test * n_pos) as f64 / n as f64).round() as usize;
    let quota = |y: u8| if y == 1 { n_test_pos } else { n_test - n_test_pos };

    let (mut test, mut train) = (Vec::new(), Vec::new());
    for (y, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let q = quota(y).min(idx.len());
        test.extend_from_slice(&idx[..q]);
        train.extend_from_slice(&idx[q..]);
    }
    (test, train)
}

/// Label-stratified fold ids in `[0, k)`: classes are shuffled, concatenated
/// and dealt round-robin, so every fold is nonempty when `k <= labels.len()`.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::seeded(seed);
    let mut order = Vec::with_capacity(labels.len());
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    // any other label values go last
    order.extend((0..labels.len()).filter(|&i| labels[i] > 1));
    let mut folds = vec![0; labels.len()];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub n_subjects: usize,
    pub n_sites: usize,
    pub feature_dim: usize,
    pub signal_dim: usize,
    pub site_shift: f64,
    pub effect_size: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_subjects: 200,
            n_sites: 3,
            feature_dim: 50,
            signal_dim: 5,
            site_shift: 1.0,
            effect_size: 1.0,
            seed: 0,
        }
    }
}

/// Additive offset applied to every feature of site `site` out of `n_sites`:
/// evenly spaced over `[-site_shift, site_shift]` (zero for one site).
pub fn site_offset(site: usize, n_sites: usize, site_shift: f64) -> f64 {
    if n_sites <= 1 {
        0.0
    } else {
        site_shift * (2.0 * site as f64 / (n_sites - 1) as f64 - 1.0)
    }
}

/// Gaussian features with per-site shifts and a planted label effect on the
/// first `signal_dim` columns. Subjects are assigned to sites round-robin.
pub fn synth_dataset(p: &SynthParams) -> Result<Dataset> {
    if p.n_subjects == 0 {
        return Err(Error::config("synthetic dataset needs at least one subject"));
    }
    if p.n_sites == 0 {
        return Err(Error::config("synthetic dataset needs at least one site"));
    }
    if p.signal_dim > p.feature_dim {
        return Err(Error::config(format!(
            "signal_dim {} exceeds feature_dim {}",
            p.signal_dim, p.feature_dim
        )));
    }
    let mut rng = rng::seeded(p.seed);
    let mut records = Vec::with_capacity(p.n_subjects);
    let mut features = Array2::<f64>::zeros((p.n_subjects, p.feature_dim));
    for i in 0..p.n_subjects {
        let site = i % p.n_sites;
        let label = if rng.random_bool(0.5) { Label::Asd } else { Label::Control };
        let age = rng.random_range(5.0..62.0);
        let sex = if rng.random_bool(0.79) { Sex::Male } else { Sex::Female };
        let offset = site_offset(site, p.n_sites, p.site_shift);
        let mut row = features.row_mut(i);
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z + offset;
        }
        if label == Label::Asd {
            row.slice_mut(s![..p.signal_dim])
                .mapv_inplace(|v| v + p.effect_size);
        }
        records.push(SubjectRecord {
            subject_id: format!("sub-{i:05}"),
            site_id: site as u32,
            age,
            sex,
            label,
            qc_pass: true,
        });
    }
    Dataset::new(records, features)
}
