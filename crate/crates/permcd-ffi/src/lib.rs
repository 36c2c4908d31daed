//! C ABI for the coordinate-descent library.
//!
//! Conventions: handles are opaque pointers created and freed here;
//! every fallible call returns a `PermcdStatus` and writes its result
//! through out-pointers; the last error message is kept per thread and
//! retrievable with `permcd_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};

use permcd::cd_engine::{run_epochs_until, EpochTrace, OrderingStrategy};
use permcd::error::Error;
use permcd::matrices::{build_perturbed_identity, DiagonalSpec, StructuredHessian};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PermcdStatus {
    Ok = 0,
    /// A pointer was null or a parameter was outside its domain.
    InvalidArgument = 1,
    /// A computation lost too much accuracy to be trusted.
    NumericalError = 2,
    /// A statistical estimate could not be formed.
    EstimationError = 3,
    InternalError = 4,
}

/// Coordinate selection rule.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PermcdStrategy {
    Cyclic = 0,
    UniformRandom = 1,
    RandomPermutation = 2,
    DiagonalWeighted = 3,
}

/// How the diagonal weight vector is generated.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PermcdDiagonalMode {
    /// Evenly spaced weights from 0 to 1.
    Linspace = 0,
    /// Seeded uniform draws rescaled to attain 0 and 1.
    SeededUniform = 1,
}

/// Opaque handle to a structured Hessian.
pub struct PermcdHessian(StructuredHessian);

/// Opaque handle to a recorded objective trace.
pub struct PermcdTrace(EpochTrace);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_from(e: &Error) -> PermcdStatus {
    set_error(&e.to_string());
    match e {
        Error::InvalidParameter(_) | Error::Config(_) => PermcdStatus::InvalidArgument,
        Error::NumericalDegeneracy(_) => PermcdStatus::NumericalError,
        Error::Estimation(_) => PermcdStatus::EstimationError,
        Error::Io(_) => PermcdStatus::InternalError,
    }
}

fn invalid(msg: &str) -> PermcdStatus {
    set_error(msg);
    PermcdStatus::InvalidArgument
}

impl PermcdStrategy {
    fn to_internal(self) -> OrderingStrategy {
        match self {
            PermcdStrategy::Cyclic => OrderingStrategy::Cyclic,
            PermcdStrategy::UniformRandom => OrderingStrategy::UniformRandom,
            PermcdStrategy::RandomPermutation => OrderingStrategy::RandomPermutation,
            PermcdStrategy::DiagonalWeighted => OrderingStrategy::DiagonalWeighted,
        }
    }
}

/// Copies the last error message on this thread into `buf` (truncated,
/// always NUL-terminated when `cap > 0`) and returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null with
/// `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn permcd_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let len = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, len);
            *buf.add(len) = 0;
        }
        bytes.len()
    })
}

/// Builds the structured matrix `delta*I + (1-delta)*ones*ones' +
/// eps*diag(d)` with `d` generated per `mode` and writes a handle to
/// `out`. Pass `eps = 0` for the pure spike form.
///
/// # Safety
/// `out` must be a valid pointer to a pointer slot.
#[no_mangle]
pub unsafe extern "C" fn permcd_hessian_create(
    n: usize,
    delta: f64,
    eps: f64,
    mode: PermcdDiagonalMode,
    seed: u64,
    out: *mut *mut PermcdHessian,
) -> PermcdStatus {
    if out.is_null() {
        return invalid("out pointer is null");
    }
    let spec = match mode {
        PermcdDiagonalMode::Linspace => DiagonalSpec::Linspace,
        PermcdDiagonalMode::SeededUniform => DiagonalSpec::SeededUniformRescaled(seed),
    };
    match build_perturbed_identity(n, delta, eps, &spec) {
        Ok(h) => {
            *out = Box::into_raw(Box::new(PermcdHessian(h)));
            PermcdStatus::Ok
        }
        Err(e) => status_from(&e),
    }
}

/// As `permcd_hessian_create`, with caller-supplied weights that must
/// already satisfy `min(d) = 0`, `max(d) = 1`.
///
/// # Safety
/// `d` must point to `len` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn permcd_hessian_create_explicit(
    n: usize,
    delta: f64,
    eps: f64,
    d: *const f64,
    len: usize,
    out: *mut *mut PermcdHessian,
) -> PermcdStatus {
    if out.is_null() || (d.is_null() && len > 0) {
        return invalid("null pointer argument");
    }
    let weights = std::slice::from_raw_parts(d, len).to_vec();
    match build_perturbed_identity(n, delta, eps, &DiagonalSpec::Explicit(weights)) {
        Ok(h) => {
            *out = Box::into_raw(Box::new(PermcdHessian(h)));
            PermcdStatus::Ok
        }
        Err(e) => status_from(&e),
    }
}

/// Frees a Hessian handle. Null is ignored.
///
/// # Safety
/// `h` must be a handle from `permcd_hessian_create*`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn permcd_hessian_free(h: *mut PermcdHessian) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Evaluates `0.5 * x' A x` in O(n).
///
/// # Safety
/// `h` must be a live handle; `x` must point to `len` readable doubles;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn permcd_hessian_quad_value(
    h: *const PermcdHessian,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> PermcdStatus {
    if h.is_null() || x.is_null() || out.is_null() {
        return invalid("null pointer argument");
    }
    let hessian = &(*h).0;
    if len != hessian.n() {
        return invalid("x length does not match n");
    }
    *out = hessian.quad_value(std::slice::from_raw_parts(x, len));
    PermcdStatus::Ok
}

/// Runs `epochs` epochs of exact-line-search coordinate descent from
/// `x0` under the given ordering strategy and writes a trace handle.
/// The trace is truncated (and flagged) once the objective falls below
/// `f_floor`; pass `f_floor <= 0` for the default floor of 1e-280.
///
/// # Safety
/// `h` must be a live handle; `x0` must point to `len` readable
/// doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn permcd_run_epochs(
    h: *const PermcdHessian,
    x0: *const f64,
    len: usize,
    strategy: PermcdStrategy,
    epochs: usize,
    seed: u64,
    f_floor: f64,
    out: *mut *mut PermcdTrace,
) -> PermcdStatus {
    if h.is_null() || x0.is_null() || out.is_null() {
        return invalid("null pointer argument");
    }
    let hessian = &(*h).0;
    let floor = if f_floor > 0.0 {
        f_floor
    } else {
        permcd::cd_engine::UNDERFLOW_FLOOR
    };
    let x0 = std::slice::from_raw_parts(x0, len);
    match run_epochs_until(hessian, x0, strategy.to_internal(), epochs, seed, floor) {
        Ok(trace) => {
            *out = Box::into_raw(Box::new(PermcdTrace(trace)));
            PermcdStatus::Ok
        }
        Err(e) => status_from(&e),
    }
}

/// Number of recorded objective values (epochs + 1 when not truncated).
///
/// # Safety
/// `t` must be a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn permcd_trace_len(t: *const PermcdTrace) -> usize {
    if t.is_null() {
        return 0;
    }
    (*t).0.fvals.len()
}

/// Whether the run stopped early at the objective floor.
///
/// # Safety
/// `t` must be a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn permcd_trace_truncated(t: *const PermcdTrace) -> bool {
    if t.is_null() {
        return false;
    }
    (*t).0.truncated
}

/// Copies up to `cap` objective values into `buf`, returning the number
/// copied. `fvals[0]` is `f(x0)`.
///
/// # Safety
/// `t` must be a live trace handle; `buf` must point to `cap` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn permcd_trace_fvals(
    t: *const PermcdTrace,
    buf: *mut f64,
    cap: usize,
) -> usize {
    if t.is_null() || buf.is_null() {
        return 0;
    }
    let fvals = &(*t).0.fvals;
    let len = fvals.len().min(cap);
    std::ptr::copy_nonoverlapping(fvals.as_ptr(), buf, len);
    len
}

/// Frees a trace handle. Null is ignored.
///
/// # Safety
/// `t` must be a handle from `permcd_run_epochs`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn permcd_trace_free(t: *mut PermcdTrace) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Geometric-mean per-epoch rate over the final `window` epochs of a
/// trace.
///
/// # Safety
/// `t` must be a live trace handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn permcd_observed_rate(
    t: *const PermcdTrace,
    window: usize,
    out: *mut f64,
) -> PermcdStatus {
    if t.is_null() || out.is_null() {
        return invalid("null pointer argument");
    }
    match permcd::rates::observed_rate(&(*t).0, window) {
        Ok(rate) => {
            *out = rate;
            PermcdStatus::Ok
        }
        Err(e) => status_from(&e),
    }
}

/// Per-epoch rate bound for uniform random selection implied by the
/// sharper complexity estimate: `(1 - 2d/(n(1+e+d)))^n`.
#[no_mangle]
pub extern "C" fn permcd_rcd_predicted_rate(n: usize, delta: f64, eps: f64) -> f64 {
    permcd::rates::rcd_predicted_rate(n, delta, eps)
}

/// Per-epoch rate from the basic strong-convexity analysis.
#[no_mangle]
pub extern "C" fn permcd_rcd_naive_rate(n: usize, delta: f64, eps: f64) -> f64 {
    permcd::rates::rcd_naive_rate(n, delta, eps)
}

/// Per-epoch rate for diagonal-proportional sampling.
#[no_mangle]
pub extern "C" fn permcd_rcd_nonuniform_rate(n: usize, delta: f64, eps: f64, d_av: f64) -> f64 {
    permcd::rates::rcd_nonuniform_rate(n, delta, eps, d_av)
}

/// Worst-case per-epoch bound for cyclic order.
#[no_mangle]
pub extern "C" fn permcd_ccd_bound_suny(n: usize, delta: f64, eps: f64) -> f64 {
    permcd::rates::ccd_bound_suny(n, delta, eps)
}

/// `rho(C)^2` for the cyclic epoch matrix. `warning` (optional) is set
/// when the independent cross-check did not converge and the dense
/// value was used alone.
///
/// # Safety
/// `h` must be a live handle; `out` must be valid; `warning` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn permcd_ccd_spectral_rate(
    h: *const PermcdHessian,
    out: *mut f64,
    warning: *mut bool,
) -> PermcdStatus {
    if h.is_null() || out.is_null() {
        return invalid("null pointer argument");
    }
    match permcd::rates::ccd_spectral_rate(&(*h).0) {
        Ok(rate) => {
            *out = rate.rho_sq;
            if !warning.is_null() {
                *warning = !rate.cross_check_converged;
            }
            PermcdStatus::Ok
        }
        Err(e) => status_from(&e),
    }
}

/// Library build identifier as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn permcd_build_id() -> *const c_char {
    use std::sync::OnceLock;
    static BUILD: OnceLock<CString> = OnceLock::new();
    BUILD
        .get_or_init(|| CString::new(permcd::BUILD_ID).unwrap_or_default())
        .as_ptr()
}
