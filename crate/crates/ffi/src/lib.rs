//! C ABI over the `rankcf` estimator.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible function
//! returns a [`CfStatus`]; on failure the message is available from
//! [`cf_last_error_message`] on the same thread until the next call.
//! Panics are caught and reported as `CF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use rankcf::dataset::{load_csv, CsvSchema, Evidence, ObservationalDataset, TreatmentMode};
use rankcf::estimator::{CounterfactualEstimator, LossProfile};
use rankcf::kernels::{KernelFamily, KernelSpec};
use rankcf::propensity::{fit_logistic, ConstantPropensity, LogisticConfig, Propensity, PropensityModel};
use rankcf::rank::kendall_fast;
use rankcf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Coverage = 3,
    Runtime = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfKernel {
    Gaussian = 0,
    Epanechnikov = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CfEstimate {
    pub y_hat: f64,
    pub loss_at_min: f64,
    pub n_effective: f64,
    /// 0 when the estimate was clamped to an extreme knot.
    pub bounded: i32,
    pub coverage_ok: i32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CfRankReport {
    pub rho: f64,
    pub rho_tilde: f64,
    pub n_concordant: u64,
    pub n_discordant: u64,
}

/// Opaque dataset handle.
pub struct CfDataset {
    inner: ObservationalDataset,
}

/// Opaque estimator handle. Owns a copy of its reference pool.
pub struct CfEstimator {
    pool: ObservationalDataset,
    kernel: KernelSpec,
    propensity: Box<dyn Propensity + Send>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CfStatus {
    match e {
        Error::Coverage(_) => CfStatus::Coverage,
        e if e.is_input_error() => CfStatus::InvalidInput,
        _ => CfStatus::Runtime,
    }
}

/// Runs `f`, recording the error message and mapping failures to a status.
fn guard<F>(f: F) -> CfStatus
where
    F: FnOnce() -> Result<(), (CfStatus, String)>,
{
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside rankcf".into());
            CfStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (CfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (CfStatus, String) {
    (CfStatus::NullPointer, format!("{name} is null"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (CfStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (CfStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CfStatus::InvalidInput, format!("{name} is not valid UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a dataset from row-major covariates (`n * m` values). All rows
/// are marked as training rows.
///
/// # Safety
/// Array pointers must reference at least the stated number of values and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_from_arrays(
    treatments: *const f64,
    covariates: *const f64,
    outcomes: *const f64,
    n: usize,
    m: usize,
    out: *mut *mut CfDataset,
) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let x = slice_arg(treatments, n, "treatments")?.to_vec();
        let nm = n.checked_mul(m).ok_or((CfStatus::InvalidInput, "n * m overflows".to_string()))?;
        let z = slice_arg(covariates, nm, "covariates")?.to_vec();
        let y = slice_arg(outcomes, n, "outcomes")?.to_vec();
        let z = ndarray::Array2::from_shape_vec((n, m), z).map_err(|e| (CfStatus::InvalidInput, e.to_string()))?;
        let ds = ObservationalDataset::all_train(TreatmentMode::Binary, x, z, y).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CfDataset { inner: ds }));
        Ok(())
    })
}

/// Loads a CSV with columns `x`, `y`, an optional `split` and covariates.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_load_csv(path: *const c_char, out: *mut *mut CfDataset) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let ds = load_csv(path, &CsvSchema::default()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CfDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_free(ds: *mut CfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of rows, 0 for null.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_len(ds: *const CfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Number of covariates, 0 for null.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_dim(ds: *const CfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.dim())
}

/// Creates an estimator over the training rows of `ds`.
///
/// With `p_treated` in (0, 1) the propensity is that constant; otherwise
/// a logistic model is fitted on the training rows with penalty `l2` and
/// probability floor `clip`.
///
/// # Safety
/// `ds` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_new(
    ds: *const CfDataset,
    kernel: CfKernel,
    bandwidth: f64,
    p_treated: f64,
    l2: f64,
    clip: f64,
    out: *mut *mut CfEstimator,
) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let family = match kernel {
            CfKernel::Gaussian => KernelFamily::Gaussian,
            CfKernel::Epanechnikov => KernelFamily::Epanechnikov,
        };
        let kernel = KernelSpec::new(family, bandwidth).map_err(lib_err)?;
        let pool = ds.inner.split_view(rankcf::dataset::Split::Train).map_err(lib_err)?;
        let propensity: Box<dyn Propensity + Send> = if p_treated > 0.0 && p_treated < 1.0 {
            Box::new(ConstantPropensity(p_treated))
        } else {
            let cfg = LogisticConfig { l2, clip, ..LogisticConfig::default() };
            let model: PropensityModel = fit_logistic(&pool, &cfg).map_err(lib_err)?.model;
            Box::new(model)
        };
        CounterfactualEstimator::new(&pool, kernel, propensity.as_ref()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CfEstimator { pool, kernel, propensity }));
        Ok(())
    })
}

/// # Safety
/// `est` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_free(est: *mut CfEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Estimates the outcome under arm `x_prime` for a unit with covariates
/// `z` (length `m`) that received arm `x` and showed outcome `y`.
///
/// # Safety
/// `est` must be a live handle, `z` must hold `m` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_estimate(
    est: *const CfEstimator,
    x: f64,
    z: *const f64,
    m: usize,
    y: f64,
    x_prime: f64,
    out: *mut CfEstimate,
) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let est = est.as_ref().ok_or_else(|| null("est"))?;
        let z = slice_arg(z, m, "z")?.to_vec();
        let ev = Evidence::new(x, z, y, x_prime).map_err(lib_err)?;
        let inner = CounterfactualEstimator::new(&est.pool, est.kernel, est.propensity.as_ref()).map_err(lib_err)?;
        let e = inner.estimate(&ev).map_err(lib_err)?;
        *out = CfEstimate {
            y_hat: e.y_hat,
            loss_at_min: e.loss_at_min,
            n_effective: e.n_effective_target_arm,
            bounded: e.bounded as i32,
            coverage_ok: e.coverage_ok as i32,
        };
        Ok(())
    })
}

/// Minimizes `sum_k a_k |knots_k - t| + b t` exactly.
///
/// # Safety
/// `knots` and `a` must hold `len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_minimize_profile(
    knots: *const f64,
    a: *const f64,
    len: usize,
    b: f64,
    out: *mut CfEstimate,
) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let knots = slice_arg(knots, len, "knots")?.to_vec();
        let a = slice_arg(a, len, "a")?.to_vec();
        let e = LossProfile::new(knots, a, b).map_err(lib_err)?.minimize();
        *out = CfEstimate {
            y_hat: e.y_hat,
            loss_at_min: e.loss_at_min,
            n_effective: e.n_effective_target_arm,
            bounded: e.bounded as i32,
            coverage_ok: e.coverage_ok as i32,
        };
        Ok(())
    })
}

/// Kendall rank correlation of two equal-length samples.
///
/// # Safety
/// `xs` and `ys` must hold `len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_kendall(xs: *const f64, ys: *const f64, len: usize, out: *mut CfRankReport) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let xs = slice_arg(xs, len, "xs")?;
        let ys = slice_arg(ys, len, "ys")?;
        let r = kendall_fast(xs, ys).map_err(lib_err)?;
        *out = CfRankReport { rho: r.rho, rho_tilde: r.rho_tilde, n_concordant: r.n_concordant, n_discordant: r.n_discordant };
        Ok(())
    })
}
