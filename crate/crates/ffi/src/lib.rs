//! C interface to `hspline`.
//!
//! Every fallible function returns an [`HsStatus`]; on failure a message is
//! available from [`hs_last_error`] on the same thread. Objects are opaque
//! handles created by `*_build`/`*_fit` and released with the matching
//! `*_free`. Arrays are caller-owned, row-major `double` buffers whose
//! lengths are passed alongside.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use hspline::solver::{cv_select, CvMethod};
use hspline::{
    estimate_hessian, fit, fit_weighted, green_kernel, predict_oos, reweight_fit, tps_fit,
    DegeneratePolicy, Error, ErrorClass, HessianForm, PointCloud, PredictMethod, ResponseVector,
    ReweightOptions, RhoScale, TpsModel, WeightVector,
};

/// Result of every fallible call. The nonzero codes mirror the CLI's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericalError = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsPredictMethod {
    LocalTps = 0,
    LocalLinear = 1,
    LocalConvex = 2,
}

impl From<HsPredictMethod> for PredictMethod {
    fn from(m: HsPredictMethod) -> Self {
        match m {
            HsPredictMethod::LocalTps => PredictMethod::LocalTps,
            HsPredictMethod::LocalLinear => PredictMethod::LocalLinear,
            HsPredictMethod::LocalConvex => PredictMethod::LocalConvex,
        }
    }
}

/// Sample points together with their estimated Hessian penalty.
pub struct HsHessian {
    cloud: PointCloud,
    form: HessianForm,
}

/// A fitted Euclidean thin-plate spline.
pub struct HsTpsModel(TpsModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
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

type Outcome = Result<(), Failure>;

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Outcome) -> HsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => HsStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            HsStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            match e.class() {
                ErrorClass::Usage => HsStatus::InvalidArgument,
                ErrorClass::Data => HsStatus::DataError,
                ErrorClass::Numerical => HsStatus::NumericalError,
            }
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {message}"));
            HsStatus::Panic
        }
    }
}

/// # Safety
/// When non-null, `p` must point to `len` readable doubles.
unsafe fn input<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// When non-null, `p` must point to `len` writable doubles.
unsafe fn output<'a>(
    p: *mut f64,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// When non-null, `p` must be a live handle from this library.
unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn same_len(what: &'static str, expected: usize, got: usize) -> Result<(), Failure> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        }
        .into());
    }
    Ok(())
}

/// Message for the last failed call on this thread, or null after a success.
///
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn hs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hs_version() -> *const c_char {
    static VERSION: &CStr =
        match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
            Ok(v) => v,
            Err(_) => panic!("version string"),
        };
    VERSION.as_ptr()
}

/// Estimates the Hessian penalty from `n` points with `ambient` coordinates each.
///
/// # Safety
/// `points` must hold `n * ambient` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_hessian_build(
    points: *const f64,
    n: usize,
    ambient: usize,
    intrinsic_dim: usize,
    k: usize,
    skip_degenerate: bool,
    out: *mut *mut HsHessian,
) -> HsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let coords = input(points, n.saturating_mul(ambient), "points")?.to_vec();
        let cloud = PointCloud::from_flat(coords, n, ambient, intrinsic_dim)?;
        let policy = if skip_degenerate {
            DegeneratePolicy::SkipPoint
        } else {
            DegeneratePolicy::Fail
        };
        let form = estimate_hessian(&cloud, k, policy)?;
        *out = Box::into_raw(Box::new(HsHessian { cloud, form }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`hs_hessian_build`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hs_hessian_free(h: *mut HsHessian) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hs_hessian_len(h: *const HsHessian) -> usize {
    h.as_ref().map_or(0, |h| h.form.len())
}

/// Number of points dropped as degenerate.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hs_hessian_skipped(h: *const HsHessian) -> usize {
    h.as_ref().map_or(0, |h| h.form.skipped().len())
}

/// `f^T H f` for a vector of `n` function values.
///
/// # Safety
/// `f` must hold `n` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_hessian_quadratic_form(
    h: *const HsHessian,
    f: *const f64,
    n: usize,
    out: *mut f64,
) -> HsStatus {
    guard(|| {
        let h = handle(h, "hessian")?;
        let f = input(f, n, "f")?;
        let out = output(out, 1, "out")?;
        out[0] = h.form.quadratic_form(f)?;
        Ok(())
    })
}

/// Smoothing-spline fit with unit weights; `fitted` receives `n` values.
///
/// # Safety
/// `y` and `fitted` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn hs_fit(
    h: *const HsHessian,
    y: *const f64,
    n: usize,
    lambda: f64,
    fitted: *mut f64,
) -> HsStatus {
    guard(|| {
        let h = handle(h, "hessian")?;
        same_len("response length", h.form.len(), n)?;
        let y = ResponseVector::new(input(y, n, "y")?.to_vec())?;
        let out = output(fitted, n, "fitted")?;
        out.copy_from_slice(&fit(&h.form, &y, lambda)?.fitted);
        Ok(())
    })
}

/// Weighted fit `(W + lambda H) g = W y`.
///
/// # Safety
/// `y`, `w` and `fitted` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn hs_fit_weighted(
    h: *const HsHessian,
    y: *const f64,
    w: *const f64,
    n: usize,
    lambda: f64,
    fitted: *mut f64,
) -> HsStatus {
    guard(|| {
        let h = handle(h, "hessian")?;
        same_len("response length", h.form.len(), n)?;
        let y = ResponseVector::new(input(y, n, "y")?.to_vec())?;
        let w = WeightVector::new(input(w, n, "w")?.to_vec())?;
        let out = output(fitted, n, "fitted")?;
        out.copy_from_slice(&fit_weighted(&h.form, &y, &w, lambda)?.fitted);
        Ok(())
    })
}

/// Robust fit by iterative reweighting.
///
/// A `rho_scale` of zero or less selects the automatic robust scale.
/// `weights` and `iterations` may be null.
///
/// # Safety
/// `y` and `fitted` (and `weights` when non-null) must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn hs_reweight_fit(
    h: *const HsHessian,
    y: *const f64,
    n: usize,
    lambda: f64,
    max_iter: usize,
    tol: f64,
    rho_scale: f64,
    fitted: *mut f64,
    weights: *mut f64,
    iterations: *mut usize,
) -> HsStatus {
    guard(|| {
        let h = handle(h, "hessian")?;
        same_len("response length", h.form.len(), n)?;
        let y = ResponseVector::new(input(y, n, "y")?.to_vec())?;
        let out = output(fitted, n, "fitted")?;
        let opts = ReweightOptions {
            rho_scale: if rho_scale > 0.0 {
                RhoScale::Fixed(rho_scale)
            } else {
                RhoScale::Auto
            },
            max_iter,
            tol,
        };
        let result = reweight_fit(&h.form, &y, lambda, &opts)?;
        out.copy_from_slice(&result.fitted);
        if !weights.is_null() {
            output(weights, n, "weights")?.copy_from_slice(result.weights.as_slice());
        }
        if let Some(it) = iterations.as_mut() {
            *it = result.iterations;
        }
        Ok(())
    })
}

/// Leave-one-out cross-validation over `grid`.
///
/// `scores[i]` receives the score of `grid[i]`, or NaN where leave-one-out is
/// undefined. `selected` receives the chosen lambda.
///
/// # Safety
/// `y` must hold `n` doubles; `grid` and `scores` must hold `grid_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hs_cv_select(
    h: *const HsHessian,
    y: *const f64,
    n: usize,
    grid: *const f64,
    grid_len: usize,
    exact_refit: bool,
    scores: *mut f64,
    selected: *mut f64,
) -> HsStatus {
    guard(|| {
        let h = handle(h, "hessian")?;
        same_len("response length", h.form.len(), n)?;
        let y = ResponseVector::new(input(y, n, "y")?.to_vec())?;
        let grid = input(grid, grid_len, "grid")?;
        let scores = output(scores, grid_len, "scores")?;
        let selected = output(selected, 1, "selected")?;
        let method = if exact_refit {
            CvMethod::ExactRefit
        } else {
            CvMethod::SmootherShortcut
        };
        let report = cv_select(&h.form, &y, grid, method)?;
        for (slot, lambda) in scores.iter_mut().zip(grid) {
            *slot = report
                .grid
                .iter()
                .position(|g| g == lambda)
                .map_or(f64::NAN, |j| report.scores[j]);
        }
        selected[0] = report.selected;
        Ok(())
    })
}

/// Recovered coordinates: `coords` receives `n * d` values, row-major.
///
/// # Safety
/// `coords` must hold `n * d` doubles for `n` = [`hs_hessian_len`].
#[no_mangle]
pub unsafe extern "C" fn hs_null_embedding(
    h: *const HsHessian,
    d: usize,
    coords: *mut f64,
) -> HsStatus {
    guard(|| {
        let h = handle(h, "hessian")?;
        let n = h.form.len();
        let out = output(coords, n.saturating_mul(d), "coords")?;
        out.copy_from_slice(&h.form.null_embedding(d)?.coords);
        Ok(())
    })
}

/// Predicts at `x_star` (one point of the build's ambient dimension) from
/// `fitted` values at the build points.
///
/// # Safety
/// `fitted` must hold `n` doubles, `x_star` `ambient` doubles, and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_predict(
    h: *const HsHessian,
    fitted: *const f64,
    n: usize,
    x_star: *const f64,
    ambient: usize,
    k: usize,
    method: HsPredictMethod,
    out: *mut f64,
) -> HsStatus {
    guard(|| {
        let h = handle(h, "hessian")?;
        let fitted = input(fitted, n, "fitted")?;
        let x = input(x_star, ambient, "x_star")?;
        let out = output(out, 1, "out")?;
        out[0] = predict_oos(&h.cloud, fitted, x, k, method.into())?.value;
        Ok(())
    })
}

/// Green's function of the thin-plate penalty in `d` dimensions; NaN when `d` is unsupported.
#[no_mangle]
pub extern "C" fn hs_green_kernel(r: f64, d: usize) -> f64 {
    green_kernel(r, d).unwrap_or(f64::NAN)
}

/// Fits a thin-plate spline through `m` centers of dimension `dim`.
///
/// # Safety
/// `centers` must hold `m * dim` doubles, `y` `m` doubles, and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_tps_fit(
    centers: *const f64,
    m: usize,
    dim: usize,
    y: *const f64,
    lambda: f64,
    out: *mut *mut HsTpsModel,
) -> HsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let centers = input(centers, m.saturating_mul(dim), "centers")?;
        let y = input(y, m, "y")?;
        let model = tps_fit(centers, dim, y, lambda)?;
        *out = Box::into_raw(Box::new(HsTpsModel(model)));
        Ok(())
    })
}

/// Evaluates a thin-plate spline at one point of its dimension.
///
/// # Safety
/// `x` must hold `dim` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_tps_eval(
    model: *const HsTpsModel,
    x: *const f64,
    dim: usize,
    out: *mut f64,
) -> HsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let x = input(x, dim, "x")?;
        let out = output(out, 1, "out")?;
        out[0] = model.0.eval(x)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`hs_tps_fit`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hs_tps_free(model: *mut HsTpsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
