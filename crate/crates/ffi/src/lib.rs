//! C ABI over the connlatent toolkit.
//!
//! Objects are opaque handles created by `cl_*_new`/`cl_*_load`/`cl_*_fit`
//! style calls and released with the matching `cl_*_free`. Every fallible
//! call returns a [`ClStatus`]; on failure the message is available from
//! [`cl_last_error`] on the same thread. Matrices are dense row-major `f64`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use connlatent::classifiers::{fit_model, Kernel, ModelSpec, TrainedClassifier};
use connlatent::config::PipelineConfig;
use connlatent::data::{self, Dataset};
use connlatent::dvae::{self, DvaeModel, TrainConfig};
use connlatent::harmonize::{self, CombatModel};
use connlatent::pipeline;
use connlatent::Error;
use libc::{c_char, size_t};
use ndarray::Array2;

/// Result of every fallible call. Values 2 to 5 match the command-line
/// exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClStatus {
    Ok = 0,
    /// Invalid configuration or argument.
    Config = 2,
    /// Malformed or inconsistent input data, including i/o failures.
    Data = 3,
    /// Training did not produce a usable model.
    Training = 4,
    /// Metrics could not be computed.
    Evaluation = 5,
    /// A required pointer argument was null.
    NullPointer = 10,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 11,
    /// The library panicked; the handle arguments should be considered lost.
    Panic = 12,
}

/// Classifier family accepted by [`cl_classifier_fit`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClClassifierKind {
    SvmLinear = 0,
    SvmRbf = 1,
    Forest = 2,
}

/// Hyperparameters for [`cl_classifier_fit`]. Fields unused by the chosen
/// kind are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ClClassifierParams {
    pub kind: ClClassifierKind,
    pub c: f64,
    pub gamma: f64,
    pub n_trees: size_t,
    pub max_depth: size_t,
    pub seed: u64,
}

/// Opaque subject table with its feature matrix.
pub struct ClDataset(Dataset);
/// Opaque fitted ComBat model.
pub struct ClCombat(CombatModel);
/// Opaque trained DVAE.
pub struct ClDvae(DvaeModel);
/// Opaque fitted classifier with its decision threshold.
pub struct ClClassifier(TrainedClassifier);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn status_of(e: &Error) -> ClStatus {
    match e.exit_code() {
        2 => ClStatus::Config,
        4 => ClStatus::Training,
        5 => ClStatus::Evaluation,
        _ => ClStatus::Data,
    }
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last error message.
fn guard<F: FnOnce() -> FfiResult<()>>(f: F) -> ClStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (ClStatus::Ok, String::new()),
        Ok(Err(Failure::Lib(e))) => (status_of(&e), e.to_string()),
        Ok(Err(Failure::Null(what))) => (ClStatus::NullPointer, format!("{what} is null")),
        Ok(Err(Failure::Utf8(what))) => (ClStatus::InvalidUtf8, format!("{what} is not valid UTF-8")),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            (ClStatus::Panic, format!("internal panic: {m}"))
        }
    };
    set_last_error(&msg);
    status
}

unsafe fn borrow<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn string(p: *const c_char, what: &'static str) -> FfiResult<String> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| Failure::Utf8(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn matrix(p: *const f64, rows: size_t, cols: size_t, what: &'static str) -> FfiResult<Array2<f64>> {
    let n = rows.checked_mul(cols).ok_or_else(|| Error::Config(format!("{what}: {rows} x {cols} overflows")))?;
    let s = slice(p, n, what)?;
    Ok(Array2::from_shape_vec((rows, cols), s.to_vec()).expect("length checked"))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, capacity: size_t) -> FfiResult<()> {
    if src.len() > capacity {
        return Err(Error::Config(format!("output buffer holds {capacity} values, need {}", src.len())).into());
    }
    if src.is_empty() {
        return Ok(());
    }
    if dst.is_null() {
        return Err(Failure::Null("output buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// Datasets

/// Loads a metadata CSV and a feature matrix (binary or CSV).
///
/// # Safety
/// Path arguments must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl_dataset_load(
    metadata_path: *const c_char,
    features_path: *const c_char,
    out: *mut *mut ClDataset,
) -> ClStatus {
    guard(|| {
        let meta = PathBuf::from(string(metadata_path, "metadata_path")?);
        let feat = PathBuf::from(string(features_path, "features_path")?);
        write_out(out, ClDataset(data::load_dataset(&meta, &feat)?))
    })
}

/// Number of subjects in the dataset, or 0 for a null handle.
///
/// # Safety
/// `d` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn cl_dataset_len(d: *const ClDataset) -> size_t {
    d.as_ref().map_or(0, |d| d.0.len())
}

/// Feature columns of the dataset, or 0 for a null handle.
///
/// # Safety
/// `d` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn cl_dataset_feature_dim(d: *const ClDataset) -> size_t {
    d.as_ref().map_or(0, |d| d.0.feature_dim())
}

/// Copies the `len x feature_dim` feature matrix into `dst`.
///
/// # Safety
/// `d` must be a live dataset handle; `dst` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn cl_dataset_features(d: *const ClDataset, dst: *mut f64, capacity: size_t) -> ClStatus {
    guard(|| {
        let d = borrow(d, "dataset")?;
        copy_out(&d.0.features.iter().copied().collect::<Vec<_>>(), dst, capacity)
    })
}

/// Copies the 0/1 labels (1 = ASD) into `dst`.
///
/// # Safety
/// `d` must be a live dataset handle; `dst` must hold `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn cl_dataset_labels(d: *const ClDataset, dst: *mut u8, capacity: size_t) -> ClStatus {
    guard(|| {
        let d = borrow(d, "dataset")?;
        let y = d.0.labels();
        if y.len() > capacity {
            return Err(Error::Config(format!("label buffer holds {capacity} values, need {}", y.len())).into());
        }
        if !y.is_empty() {
            if dst.is_null() {
                return Err(Failure::Null("label buffer"));
            }
            ptr::copy_nonoverlapping(y.as_ptr(), dst, y.len());
        }
        Ok(())
    })
}

/// # Safety
/// `d` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cl_dataset_free(d: *mut ClDataset) {
    free(d)
}

// ---------------------------------------------------------------------------
// ComBat

/// Fits ComBat on the dataset with age and sex as protected covariates.
///
/// # Safety
/// `d` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl_combat_fit(d: *const ClDataset, out: *mut *mut ClCombat) -> ClStatus {
    guard(|| {
        let d = &borrow(d, "dataset")?.0;
        let m = harmonize::combat_fit(&d.features, &d.sites(), &d.covariates())?;
        write_out(out, ClCombat(m))
    })
}

/// Harmonizes the dataset's features into `dst` (`len x feature_dim`).
///
/// # Safety
/// Handles must be live; `dst` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn cl_combat_apply(
    m: *const ClCombat,
    d: *const ClDataset,
    dst: *mut f64,
    capacity: size_t,
) -> ClStatus {
    guard(|| {
        let m = &borrow(m, "combat model")?.0;
        let d = &borrow(d, "dataset")?.0;
        let h = harmonize::combat_apply(m, &d.features, &d.sites(), &d.covariates())?;
        copy_out(&h.iter().copied().collect::<Vec<_>>(), dst, capacity)
    })
}

/// # Safety
/// `m` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cl_combat_save(m: *const ClCombat, path: *const c_char) -> ClStatus {
    guard(|| {
        let m = &borrow(m, "combat model")?.0;
        Ok(harmonize::save_model(&PathBuf::from(string(path, "path")?), m)?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl_combat_load(path: *const c_char, out: *mut *mut ClCombat) -> ClStatus {
    guard(|| {
        let m = harmonize::load_model(&PathBuf::from(string(path, "path")?))?;
        write_out(out, ClCombat(m))
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cl_combat_free(m: *mut ClCombat) {
    free(m)
}

// ---------------------------------------------------------------------------
// DVAE

/// Trains a DVAE on a `rows x cols` matrix with the default architecture
/// and the given epoch count and seed.
///
/// # Safety
/// `x` must point to `rows * cols` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl_dvae_train(
    x: *const f64,
    rows: size_t,
    cols: size_t,
    epochs: size_t,
    seed: u64,
    out: *mut *mut ClDvae,
) -> ClStatus {
    guard(|| {
        let x = matrix(x, rows, cols, "x")?;
        let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
        let (m, _) = dvae::train(&x, &cfg)?;
        write_out(out, ClDvae(m))
    })
}

/// Width of the extracted feature rows, `2 * latent_dim`, or 0 for a null
/// handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cl_dvae_output_dim(m: *const ClDvae) -> size_t {
    m.as_ref().map_or(0, |m| 2 * m.0.latent_dim)
}

/// Writes `[mu | logvar]` for each row of `x` into `dst`.
///
/// # Safety
/// `m` must be live; `x` must point to `rows * cols` values; `dst` must hold
/// `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn cl_dvae_extract(
    m: *const ClDvae,
    x: *const f64,
    rows: size_t,
    cols: size_t,
    dst: *mut f64,
    capacity: size_t,
) -> ClStatus {
    guard(|| {
        let m = &borrow(m, "dvae model")?.0;
        let z = dvae::extract(m, &matrix(x, rows, cols, "x")?)?.to_matrix();
        copy_out(&z.iter().copied().collect::<Vec<_>>(), dst, capacity)
    })
}

/// # Safety
/// `m` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cl_dvae_save(m: *const ClDvae, path: *const c_char) -> ClStatus {
    guard(|| {
        let m = &borrow(m, "dvae model")?.0;
        Ok(dvae::save_model(&PathBuf::from(string(path, "path")?), m)?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl_dvae_load(path: *const c_char, out: *mut *mut ClDvae) -> ClStatus {
    guard(|| {
        let m = dvae::load_model(&PathBuf::from(string(path, "path")?))?;
        write_out(out, ClDvae(m))
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cl_dvae_free(m: *mut ClDvae) {
    free(m)
}

// ---------------------------------------------------------------------------
// Classifiers

/// Fits one classifier on `rows x cols` features and 0/1 labels. The
/// threshold is the family default (0 for SVM, 0.5 for the forest).
///
/// # Safety
/// `x` must point to `rows * cols` values and `y` to `rows` labels; `params`
/// must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl_classifier_fit(
    x: *const f64,
    y: *const u8,
    rows: size_t,
    cols: size_t,
    params: *const ClClassifierParams,
    out: *mut *mut ClClassifier,
) -> ClStatus {
    guard(|| {
        let p = *borrow(params, "params")?;
        let x = matrix(x, rows, cols, "x")?;
        let y = slice(y, rows, "y")?;
        let spec = match p.kind {
            ClClassifierKind::SvmLinear => ModelSpec::Svm { kernel: Kernel::Linear, c: p.c },
            ClClassifierKind::SvmRbf => ModelSpec::Svm { kernel: Kernel::Rbf { gamma: p.gamma }, c: p.c },
            ClClassifierKind::Forest => ModelSpec::Forest { n_trees: p.n_trees, max_depth: p.max_depth },
        };
        write_out(out, ClClassifier(fit_model(&x, y, spec, p.seed)?))
    })
}

/// Sets the decision threshold applied by [`cl_classifier_predict`].
///
/// # Safety
/// `c` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cl_classifier_set_threshold(c: *mut ClClassifier, threshold: f64) -> ClStatus {
    guard(|| {
        c.as_mut().ok_or(Failure::Null("classifier"))?.0.set_threshold(threshold);
        Ok(())
    })
}

/// Scores each row into `scores` and, when `labels` is not null, writes
/// `1` where the score exceeds the threshold.
///
/// # Safety
/// `c` must be live; `x` must point to `rows * cols` values; `scores` (and
/// `labels` if given) must hold `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn cl_classifier_predict(
    c: *const ClClassifier,
    x: *const f64,
    rows: size_t,
    cols: size_t,
    scores: *mut f64,
    labels: *mut u8,
) -> ClStatus {
    guard(|| {
        let c = &borrow(c, "classifier")?.0;
        let (s, l) = c.predict(&matrix(x, rows, cols, "x")?)?;
        copy_out(&s, scores, rows)?;
        if !labels.is_null() && !l.is_empty() {
            ptr::copy_nonoverlapping(l.as_ptr(), labels, l.len());
        }
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cl_classifier_free(c: *mut ClClassifier) {
    free(c)
}

// ---------------------------------------------------------------------------
// Whole runs

/// Runs the full pipeline. `preset` and `config_path` may be null;
/// `overrides` holds `n_overrides` `key=value` strings applied last.
///
/// # Safety
/// Non-null strings must be NUL-terminated; `overrides` must point to
/// `n_overrides` string pointers.
#[no_mangle]
pub unsafe extern "C" fn cl_run_pipeline(
    preset: *const c_char,
    config_path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: size_t,
) -> ClStatus {
    guard(|| {
        let preset = if preset.is_null() { None } else { Some(string(preset, "preset")?) };
        let file = if config_path.is_null() { None } else { Some(PathBuf::from(string(config_path, "config_path")?)) };
        let sets = slice(overrides, n_overrides, "overrides")?
            .iter()
            .map(|&p| string(p, "override"))
            .collect::<FfiResult<Vec<_>>>()?;
        let cfg = PipelineConfig::resolve(preset.as_deref(), file.as_deref(), &sets)?;
        pipeline::run_pipeline(&cfg)?;
        Ok(())
    })
}
