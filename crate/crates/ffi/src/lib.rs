//! C interface to `ctrisk`.
//!
//! Datasets live behind an opaque handle. Every fallible call returns a
//! [`CtriskStatus`]; on failure, [`ctrisk_last_error_message`] describes the
//! error for the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ctrisk::io::{load_dataset, ColumnMap};
use ctrisk::nuisance::{FeatureSpec, ModelSpecs, PropensitySpec};
use ctrisk::{
    estimate_stwcr, estimate_stwcrve, make_folds, Dataset, Error, NuisanceSource, Observation, OutcomeKind,
    SmoothingParams, StwcrQuery, StwcrveQuery,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtriskStatus {
    Ok = 0,
    InvalidParameter = 1,
    Parse = 2,
    Solver = 3,
    Evaluation = 4,
    Estimation = 5,
    Io = 6,
    NullPointer = 7,
    Panic = 8,
}

/// Outcome type passed to [`ctrisk_dataset_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtriskOutcome {
    /// Binary if every outcome is 0 or 1, continuous otherwise.
    Infer = 0,
    Binary = 1,
    Continuous = 2,
}

/// Opaque dataset handle.
pub struct CtriskDataset {
    inner: Dataset,
}

/// Tuning and cross-fitting settings; start from [`ctrisk_params_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CtriskParams {
    pub t: f64,
    pub epsilon: f64,
    pub h: f64,
    pub h0: f64,
    pub h1: f64,
    pub alpha: f64,
    pub quad_nodes: u32,
    /// Kernel truncation radius in bandwidths.
    pub window: f64,
    pub folds: u32,
    pub seed: u64,
    /// Constant `P(A = 1)`; ignored when `propensity_spec` is set.
    pub known_propensity: f64,
    /// Logistic propensity features such as `"1,b,x1"`, or NULL.
    pub propensity_spec: *const c_char,
    /// Conditional marker density features, or NULL for `"1,b,a,x1,x2^2"`.
    pub density_spec: *const c_char,
    /// Outcome regression features, or NULL for `"1,x2,x3,s,a,b"`.
    pub outcome_spec: *const c_char,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CtriskStwcrReport {
    pub tau_num_hat: f64,
    pub tau_den_hat: f64,
    pub tau_hat: f64,
    pub sigma1_sq_hat: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: u64,
    pub density_floor_hits: u64,
    pub degenerate_folds: u64,
    pub warning_count: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CtriskStwcrveReport {
    pub tau_num_hat: f64,
    pub tau_den_hat: f64,
    pub rho_hat: f64,
    pub delta_hat: f64,
    pub sigma2log_sq_hat: f64,
    pub rho_lo: f64,
    pub rho_hi: f64,
    pub delta_lo: f64,
    pub delta_hi: f64,
    /// Nonzero when the interval was formed on the direct scale.
    pub direct_scale_ci: u8,
    pub sigma2_sq_hat: f64,
    pub n: u64,
    pub density_floor_hits: u64,
    pub degenerate_folds: u64,
    pub warning_count: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> CtriskStatus {
    match err.kind() {
        "invalid_parameter" => CtriskStatus::InvalidParameter,
        "parse" => CtriskStatus::Parse,
        "solver" => CtriskStatus::Solver,
        "evaluation" => CtriskStatus::Evaluation,
        "estimation" | "harness" => CtriskStatus::Estimation,
        _ => CtriskStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CtriskStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CtriskStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer passed for {what}"));
            CtriskStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            CtriskStatus::Panic
        }
    }
}

unsafe fn opt_str<'a>(p: *const c_char) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| Failure::Lib(Error::InvalidParameter("string is not valid UTF-8".into())))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the most recent failure on this thread, or NULL.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ctrisk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ctrisk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn ctrisk_params_default() -> CtriskParams {
    let p = SmoothingParams::default();
    CtriskParams {
        t: p.t,
        epsilon: p.epsilon,
        h: p.h,
        h0: p.h0,
        h1: p.h1,
        alpha: p.alpha,
        quad_nodes: p.quad_nodes as u32,
        window: p.window_halfwidth_in_h,
        folds: 5,
        seed: 1,
        known_propensity: 0.5,
        propensity_spec: ptr::null(),
        density_spec: ptr::null(),
        outcome_spec: ptr::null(),
    }
}

/// Builds a dataset from column arrays of length `n`; `x` is row-major `n × p`
/// and its columns are named `x1..xp`.
///
/// # Safety
/// Every non-null pointer must reference the stated number of elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctrisk_dataset_new(
    y: *const f64,
    a: *const u8,
    s: *const f64,
    b: *const f64,
    x: *const f64,
    n: usize,
    p: usize,
    outcome: CtriskOutcome,
    out: *mut *mut CtriskDataset,
) -> CtriskStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        if a.is_null() && n > 0 {
            return Err(Failure::Null("a"));
        }
        let (y, s, b, x) = (slice(y, n, "y")?, slice(s, n, "s")?, slice(b, n, "b")?, slice(x, n * p, "x")?);
        let a = if n == 0 { &[][..] } else { std::slice::from_raw_parts(a, n) };
        let obs: Vec<Observation> = (0..n)
            .map(|i| Observation { y: y[i], a: a[i], s: s[i], b: b[i], x: x[i * p..(i + 1) * p].to_vec() })
            .collect();
        let kind = match outcome {
            CtriskOutcome::Binary => OutcomeKind::Binary,
            CtriskOutcome::Continuous => OutcomeKind::Continuous,
            CtriskOutcome::Infer if y.iter().all(|&v| v == 0.0 || v == 1.0) => OutcomeKind::Binary,
            CtriskOutcome::Infer => OutcomeKind::Continuous,
        };
        let names = (1..=p).map(|k| format!("x{k}")).collect();
        let ds = Dataset::new(obs, kind, names)?;
        *out = Box::into_raw(Box::new(CtriskDataset { inner: ds }));
        Ok(())
    })
}

/// Loads a CSV with columns `y,a,s,b,x1..xp`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctrisk_dataset_from_csv(path: *const c_char, out: *mut *mut CtriskDataset) -> CtriskStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let path = opt_str(path)?.ok_or(Failure::Null("path"))?;
        let ds = load_dataset(path, &ColumnMap::default(), None)?;
        *out = Box::into_raw(Box::new(CtriskDataset { inner: ds }));
        Ok(())
    })
}

/// Number of observations, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctrisk_dataset_len(ds: *const CtriskDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Releases a dataset; NULL is ignored.
///
/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ctrisk_dataset_free(ds: *mut CtriskDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

unsafe fn resolve(params: *const CtriskParams) -> Result<(SmoothingParams, ModelSpecs, usize, u64), Failure> {
    let p = params.as_ref().ok_or(Failure::Null("params"))?;
    let smoothing = SmoothingParams {
        t: p.t,
        epsilon: p.epsilon,
        h: p.h,
        h0: p.h0,
        h1: p.h1,
        alpha: p.alpha,
        quad_nodes: p.quad_nodes as usize,
        window_halfwidth_in_h: p.window,
    };
    smoothing.validate()?;
    let d = ModelSpecs::default();
    let spec = |ptr: *const c_char, fallback: FeatureSpec| -> Result<FeatureSpec, Failure> {
        Ok(match opt_str(ptr)? {
            Some(text) => text.parse()?,
            None => fallback,
        })
    };
    let propensity = match opt_str(p.propensity_spec)? {
        Some(text) => PropensitySpec::Logistic(text.parse()?),
        None => PropensitySpec::Known(p.known_propensity),
    };
    let models = ModelSpecs {
        propensity,
        cond_density: spec(p.density_spec, d.cond_density)?,
        outcome: spec(p.outcome_spec, d.outcome)?,
        irls: d.irls,
    };
    Ok((smoothing, models, p.folds as usize, p.seed))
}

/// Cross-fitted STWCR(a, s).
///
/// # Safety
/// `ds` must be a live handle, `params` and `out` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ctrisk_estimate_stwcr(
    ds: *const CtriskDataset,
    params: *const CtriskParams,
    a: u8,
    s: f64,
    out: *mut CtriskStwcrReport,
) -> CtriskStatus {
    guard(|| {
        let data = &ds.as_ref().ok_or(Failure::Null("dataset"))?.inner;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let (smoothing, models, k, seed) = resolve(params)?;
        let folds = make_folds(data.len(), k, seed)?;
        let r = estimate_stwcr(data, &StwcrQuery { a, s }, &smoothing, &folds, &NuisanceSource::Fitted(models))?;
        *out = CtriskStwcrReport {
            tau_num_hat: r.tau_num_hat,
            tau_den_hat: r.tau_den_hat,
            tau_hat: r.tau_hat,
            sigma1_sq_hat: r.sigma1_sq_hat,
            se: r.se,
            ci_lo: r.ci.lo,
            ci_hi: r.ci.hi,
            n: r.n as u64,
            density_floor_hits: r.density_floor_hits as u64,
            degenerate_folds: r.degenerate_folds as u64,
            warning_count: r.warnings.len() as u64,
        };
        Ok(())
    })
}

/// Cross-fitted STWCRVE(a1, a0, s1, s0).
///
/// # Safety
/// `ds` must be a live handle, `params` and `out` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ctrisk_estimate_stwcrve(
    ds: *const CtriskDataset,
    params: *const CtriskParams,
    a1: u8,
    a0: u8,
    s1: f64,
    s0: f64,
    out: *mut CtriskStwcrveReport,
) -> CtriskStatus {
    guard(|| {
        let data = &ds.as_ref().ok_or(Failure::Null("dataset"))?.inner;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let (smoothing, models, k, seed) = resolve(params)?;
        let folds = make_folds(data.len(), k, seed)?;
        let q = StwcrveQuery { a1, a0, s1, s0 };
        let r = estimate_stwcrve(data, &q, &smoothing, &folds, &NuisanceSource::Fitted(models))?;
        *out = CtriskStwcrveReport {
            tau_num_hat: r.tau_num_hat,
            tau_den_hat: r.tau_den_hat,
            rho_hat: r.rho_hat,
            delta_hat: r.delta_hat,
            sigma2log_sq_hat: r.sigma2log_sq_hat,
            rho_lo: r.ci_rho.lo,
            rho_hi: r.ci_rho.hi,
            delta_lo: r.ci_delta.lo,
            delta_hi: r.ci_delta.hi,
            direct_scale_ci: (r.ci_scale == ctrisk::estimators::CiScale::Direct) as u8,
            sigma2_sq_hat: r.sigma2_sq_hat,
            n: r.n as u64,
            density_floor_hits: r.density_floor_hits as u64,
            degenerate_folds: r.degenerate_folds as u64,
            warning_count: r.warnings.len() as u64,
        };
        Ok(())
    })
}
