//! C interface to `recency-core`.
//!
//! Every function returns a [`RecencyStatus`]; on failure a message is kept
//! per thread and can be read with [`recency_last_error`]. Handles are opaque
//! and must be released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use recency_core::estimation::{fit, FitOptions, FitResult};
use recency_core::model::{ModelSpec, Subject};
use recency_core::prediction::{incidence, recency_rate, type1_risk, type2_risk};
use recency_core::simulation::auc;
use recency_core::RecencyError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecencyStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Singular = 5,
    NoCovariance = 6,
    Panic = 7,
}

/// Model options. A NaN anchor means the parameter is estimated.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RecencySpec {
    pub fix_eta00: f64,
    pub fix_eta10: f64,
    pub p0_one: bool,
    pub extended: bool,
}

/// Subjects ready for fitting.
pub struct RecencyDataset {
    subjects: Vec<Subject>,
    n_covariates: usize,
}

/// A fitted model.
pub struct RecencyFit {
    result: FitResult,
    names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &RecencyError) -> RecencyStatus {
    match err {
        RecencyError::DimensionMismatch { .. } => RecencyStatus::DimensionMismatch,
        RecencyError::SingularInformation { .. } => RecencyStatus::Singular,
        RecencyError::NonFiniteScore { .. } | RecencyError::TiltOverflow { .. } => RecencyStatus::Numerical,
        _ => RecencyStatus::InvalidArgument,
    }
}

fn guard<F>(body: F) -> RecencyStatus
where
    F: FnOnce() -> Result<(), (RecencyStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => RecencyStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RecencyStatus::Panic
        }
    }
}

fn core<T>(r: recency_core::Result<T>) -> Result<T, (RecencyStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (RecencyStatus, String) {
    (RecencyStatus::NullPointer, format!("{what} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (RecencyStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (RecencyStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), (RecencyStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message for the last failed call on this thread; empty when none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn recency_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build a dataset of `n` subjects. `covariates` is row-major `n x p`;
/// `s` is years since the last HIV test and `z[i]` is nonzero when that
/// test was positive.
///
/// # Safety
/// Every array must hold `n` (or `n * p`) readable elements.
#[no_mangle]
pub unsafe extern "C" fn recency_dataset_new(
    n: usize,
    p: usize,
    covariates: *const f64,
    s: *const f64,
    z: *const u8,
    w: *const f64,
    out: *mut *mut RecencyDataset,
) -> RecencyStatus {
    guard(|| {
        let len = n.checked_mul(p).ok_or((RecencyStatus::InvalidArgument, "n * p overflows".into()))?;
        let x = as_slice(covariates, len, "covariates")?;
        let s = as_slice(s, n, "s")?;
        let z = as_slice(z, n, "z")?;
        let w = as_slice(w, n, "w")?;
        let subjects: Vec<Subject> = (0..n)
            .map(|i| Subject::new(x[i * p..(i + 1) * p].to_vec(), s[i], z[i] != 0, w[i]))
            .collect();
        core(recency_core::model::validate_subjects(&subjects))?;
        let handle = Box::new(RecencyDataset {
            subjects,
            n_covariates: p,
        });
        write_out(out, Box::into_raw(handle), "out")
    })
}

/// # Safety
/// `dataset` must come from [`recency_dataset_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn recency_dataset_free(dataset: *mut RecencyDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

fn anchor(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

/// Fit the model. Weights must already sum to the number of subjects.
///
/// # Safety
/// `dataset` and `spec` must be valid pointers; `out` receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn recency_fit(
    dataset: *const RecencyDataset,
    spec: *const RecencySpec,
    out: *mut *mut RecencyFit,
) -> RecencyStatus {
    guard(|| {
        let d = as_ref(dataset, "dataset")?;
        let o = as_ref(spec, "spec")?;
        let names: Vec<String> = (1..=d.n_covariates).map(|j| format!("x{j}")).collect();
        let base = ModelSpec::new(names);
        let model = if o.p0_one {
            if anchor(o.fix_eta00).is_some() {
                return Err((RecencyStatus::InvalidArgument, "p0_one requires fix_eta00 = NaN".into()));
            }
            base.with_p0_one(anchor(o.fix_eta10))
        } else {
            base.with_fixed_eta(anchor(o.fix_eta00), anchor(o.fix_eta10))
        }
        .with_extended(o.extended);
        let result = core(fit(&d.subjects, &model, None, &FitOptions::default()))?;
        let names = result
            .free_param_names()
            .into_iter()
            .map(|n| CString::new(n).unwrap_or_default())
            .collect();
        write_out(out, Box::into_raw(Box::new(RecencyFit { result, names })), "out")
    })
}

/// # Safety
/// `fit` must come from [`recency_fit`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_free(fit: *mut RecencyFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Number of estimated parameters; 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_n_free(fit: *const RecencyFit) -> usize {
    fit.as_ref().map_or(0, |f| f.names.len())
}

/// Name of free parameter `i`, owned by the handle; null when out of range.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_param_name(fit: *const RecencyFit, i: usize) -> *const c_char {
    fit.as_ref()
        .and_then(|f| f.names.get(i))
        .map_or(ptr::null(), |n| n.as_ptr())
}

/// Copy the free-parameter estimates into `buf` (length `len`, at least
/// [`recency_fit_n_free`]).
///
/// # Safety
/// `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_estimates(fit: *const RecencyFit, buf: *mut f64, len: usize) -> RecencyStatus {
    guard(|| {
        let f = as_ref(fit, "fit")?;
        copy_into(&f.result.estimates(), buf, len)
    })
}

/// Copy the row-major sandwich covariance (`k x k`, `k` free parameters).
///
/// # Safety
/// `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_covariance(fit: *const RecencyFit, buf: *mut f64, len: usize) -> RecencyStatus {
    guard(|| {
        let f = as_ref(fit, "fit")?;
        let Some(c) = &f.result.covariance else {
            let why = f.result.covariance_error.clone().unwrap_or_else(|| "no covariance".into());
            return Err((RecencyStatus::NoCovariance, why));
        };
        let k = c.nrows();
        let flat: Vec<f64> = (0..k).flat_map(|i| (0..k).map(move |j| c[(i, j)])).collect();
        copy_into(&flat, buf, len)
    })
}

unsafe fn copy_into(values: &[f64], buf: *mut f64, len: usize) -> Result<(), (RecencyStatus, String)> {
    if len < values.len() {
        return Err((
            RecencyStatus::DimensionMismatch,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    if values.is_empty() {
        return Ok(());
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    Ok(())
}

/// Maximized log pseudo-likelihood; NaN for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_log_pl(fit: *const RecencyFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.result.log_pl)
}

/// BIC of the fit; NaN for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_bic(fit: *const RecencyFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.result.bic)
}

/// Whether the optimizer met the score tolerance.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_converged(fit: *const RecencyFit) -> bool {
    fit.as_ref().is_some_and(|f| f.result.converged)
}

unsafe fn subject(x: *const f64, p: usize, s: f64, z: u8) -> Result<Subject, (RecencyStatus, String)> {
    Ok(Subject::new(as_slice(x, p, "covariates")?.to_vec(), s, z != 0, 1.0))
}

/// Probability of recent infection from covariates alone.
///
/// # Safety
/// `covariates` must hold `p` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_type1_risk(
    fit: *const RecencyFit,
    covariates: *const f64,
    p: usize,
    out: *mut f64,
) -> RecencyStatus {
    guard(|| {
        let f = as_ref(fit, "fit")?;
        let subj = subject(covariates, p, 1.0, 0)?;
        write_out(out, core(type1_risk(&subj, &f.result.theta_hat))?, "out")
    })
}

/// Probability of recent infection given covariates, `s` and the last test
/// result `z` (nonzero = positive).
///
/// # Safety
/// `covariates` must hold `p` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_type2_risk(
    fit: *const RecencyFit,
    covariates: *const f64,
    p: usize,
    s: f64,
    z: u8,
    out: *mut f64,
) -> RecencyStatus {
    guard(|| {
        let f = as_ref(fit, "fit")?;
        let subj = subject(covariates, p, s, z)?;
        core(subj.validate(0))?;
        write_out(out, core(type2_risk(&subj, &f.result.theta_hat, &f.result.spec))?, "out")
    })
}

/// Weighted mean Type-2 risk over a dataset.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recency_fit_recency_rate(
    fit: *const RecencyFit,
    dataset: *const RecencyDataset,
    out: *mut f64,
) -> RecencyStatus {
    guard(|| {
        let f = as_ref(fit, "fit")?;
        let d = as_ref(dataset, "dataset")?;
        let rate = core(recency_rate(&d.subjects, &f.result.theta_hat, &f.result.spec))?;
        write_out(out, rate, "out")
    })
}

/// Incidence from prevalence, treatment coverage and the recency rate.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recency_incidence(p_hiv: f64, p_art: f64, e_y: f64, out: *mut f64) -> RecencyStatus {
    guard(|| write_out(out, core(incidence(p_hiv, p_art, e_y))?, "out"))
}

/// Area under the ROC curve; `labels[i]` nonzero marks a positive.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recency_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> RecencyStatus {
    guard(|| {
        let scores = as_slice(scores, n, "scores")?;
        let labels: Vec<bool> = as_slice(labels, n, "labels")?.iter().map(|l| *l != 0).collect();
        write_out(out, core(auc(scores, &labels))?, "out")
    })
}
