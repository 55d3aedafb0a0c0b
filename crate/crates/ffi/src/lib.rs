//! C ABI over the mirror-descent controller: opaque handles, status-code
//! returns, and a per-thread error message.
//!
//! Handles are not synchronized; share one across threads only behind the
//! caller's own lock. The pointer from [`mdadapt_last_error_message`] stays
//! valid until the next failing call on the same thread.

use mdadapt::controller::{adaptation_rhs, md_control_quad, sliding};
use mdadapt::error::Error;
use mdadapt::features::{feature_net, MlpParams};
use mdadapt::pipeline::Checkpoint;
use mdadapt::potential::Potential;
use mdadapt::simulate::MdGains;
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Result of an FFI call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdadaptStatus {
    Ok = 0,
    /// Null pointer, malformed JSON, or inconsistent dimensions.
    InvalidArgument = 1,
    /// Singular Hessian or non-finite arithmetic.
    Numerical = 2,
    /// Filesystem failure while reading a checkpoint.
    Io = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: MdadaptStatus, message: &str) -> MdadaptStatus {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default());
    status
}

fn fail_with(e: &Error) -> MdadaptStatus {
    let status = match e {
        Error::Io(_) => MdadaptStatus::Io,
        Error::InvalidConfig(_) | Error::DimensionMismatch(_) | Error::Json(_) => {
            MdadaptStatus::InvalidArgument
        }
        _ => MdadaptStatus::Numerical,
    };
    fail(status, &e.to_string())
}

fn guarded(f: impl FnOnce() -> MdadaptStatus) -> MdadaptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(MdadaptStatus::Numerical, "internal panic"),
    }
}

/// Trained controller: decoded gains, the matching potential, and the
/// feature network.
pub struct MdadaptController {
    gains: MdGains<f64>,
    theta: MlpParams,
    potential: Potential,
}

/// Standalone smoothed l^p potential.
pub struct MdadaptPotential {
    inner: Potential,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mdadapt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread, empty if none.
#[no_mangle]
pub extern "C" fn mdadapt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn controller_from_json_text(json: &str) -> Result<MdadaptController, Error> {
    let checkpoint: Checkpoint = serde_json::from_str(json)?;
    let params = checkpoint.meta_params()?;
    let gains = params.md_gains();
    let theta = params.theta;
    if theta.arch.output_dim() != 3 * theta.d || gains.d() != theta.d {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint feature net emits {} outputs for d = {}",
            theta.arch.output_dim(),
            theta.d
        )));
    }
    let potential = Potential::new(gains.p_exp, gains.epsilon)?;
    Ok(MdadaptController {
        gains,
        theta,
        potential,
    })
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> MdadaptStatus {
    if out.is_null() {
        return fail(MdadaptStatus::InvalidArgument, "null output handle");
    }
    *out = Box::into_raw(Box::new(value));
    MdadaptStatus::Ok
}

/// Loads a controller from a meta-train checkpoint file. On success writes
/// a handle the caller must release with [`mdadapt_controller_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_controller_from_checkpoint(
    path: *const c_char,
    out: *mut *mut MdadaptController,
) -> MdadaptStatus {
    guarded(|| {
        if path.is_null() {
            return fail(MdadaptStatus::InvalidArgument, "null path");
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(p) => p,
            Err(_) => return fail(MdadaptStatus::InvalidArgument, "path is not UTF-8"),
        };
        let json = match std::fs::read_to_string(path) {
            Ok(j) => j,
            Err(e) => return fail(MdadaptStatus::Io, &format!("{path}: {e}")),
        };
        match controller_from_json_text(&json) {
            Ok(ctrl) => write_handle(out, ctrl),
            Err(e) => fail_with(&e),
        }
    })
}

/// Same as [`mdadapt_controller_from_checkpoint`] but parses checkpoint
/// JSON the caller already holds in memory.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_controller_from_json(
    json: *const c_char,
    out: *mut *mut MdadaptController,
) -> MdadaptStatus {
    guarded(|| {
        if json.is_null() {
            return fail(MdadaptStatus::InvalidArgument, "null json");
        }
        let json = match CStr::from_ptr(json).to_str() {
            Ok(j) => j,
            Err(_) => return fail(MdadaptStatus::InvalidArgument, "json is not UTF-8"),
        };
        match controller_from_json_text(json) {
            Ok(ctrl) => write_handle(out, ctrl),
            Err(e) => fail_with(&e),
        }
    })
}

/// Releases a controller handle. Null is a no-op.
///
/// # Safety
/// `ctrl` must be null or a handle this library returned, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_controller_free(ctrl: *mut MdadaptController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Number of adaptation parameters d, or 0 for a null handle.
///
/// # Safety
/// `ctrl` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_controller_dim(ctrl: *const MdadaptController) -> usize {
    if ctrl.is_null() {
        0
    } else {
        (*ctrl).theta.d
    }
}

/// Decoded Bregman exponent p, or NaN for a null handle.
///
/// # Safety
/// `ctrl` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_controller_exponent(ctrl: *const MdadaptController) -> f64 {
    if ctrl.is_null() {
        f64::NAN
    } else {
        (*ctrl).gains.p_exp
    }
}

unsafe fn read3(p: *const f64) -> [f64; 3] {
    [*p, *p.add(1), *p.add(2)]
}

/// Control input for the current state and adaptation estimate.
///
/// `q`, `qd`, `q_r`, `qd_r`, `qdd_r`, and `u_out` point at 3 doubles;
/// `ahat` points at d doubles.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_control(
    ctrl: *const MdadaptController,
    q: *const f64,
    qd: *const f64,
    q_r: *const f64,
    qd_r: *const f64,
    qdd_r: *const f64,
    ahat: *const f64,
    u_out: *mut f64,
) -> MdadaptStatus {
    guarded(|| {
        if ctrl.is_null() {
            return fail(MdadaptStatus::InvalidArgument, "null controller");
        }
        for p in [q, qd, q_r, qd_r, qdd_r, ahat] {
            if p.is_null() {
                return fail(MdadaptStatus::InvalidArgument, "null state pointer");
            }
        }
        if u_out.is_null() {
            return fail(MdadaptStatus::InvalidArgument, "null output pointer");
        }
        let c = &*ctrl;
        let (q, qd) = (read3(q), read3(qd));
        let state6 = [q[0], q[1], q[2], qd[0], qd[1], qd[2]];
        let yhat = match feature_net(&c.theta.arch, &c.theta.data, &state6, c.theta.d) {
            Ok(y) => y,
            Err(e) => return fail_with(&e),
        };
        let sl = sliding(&q, &qd, &read3(q_r), &read3(qd_r), &read3(qdd_r), &c.gains.lambda);
        let ahat = std::slice::from_raw_parts(ahat, c.theta.d);
        let u = md_control_quad(q[2], &sl, &c.gains.k, &yhat, ahat);
        if u.iter().any(|x| !x.is_finite()) {
            return fail(MdadaptStatus::Numerical, "control input is not finite");
        }
        ptr::copy_nonoverlapping(u.as_ptr(), u_out, 3);
        MdadaptStatus::Ok
    })
}

/// Time derivative of the adaptation estimate under the mirror-descent
/// law, for the caller's own integrator.
///
/// `q`, `qd`, `q_r`, `qd_r` point at 3 doubles; `ahat` and `dahat_out`
/// point at d doubles.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_adaptation(
    ctrl: *const MdadaptController,
    q: *const f64,
    qd: *const f64,
    q_r: *const f64,
    qd_r: *const f64,
    ahat: *const f64,
    dahat_out: *mut f64,
) -> MdadaptStatus {
    guarded(|| {
        if ctrl.is_null() {
            return fail(MdadaptStatus::InvalidArgument, "null controller");
        }
        for p in [q, qd, q_r, qd_r, ahat] {
            if p.is_null() {
                return fail(MdadaptStatus::InvalidArgument, "null state pointer");
            }
        }
        if dahat_out.is_null() {
            return fail(MdadaptStatus::InvalidArgument, "null output pointer");
        }
        let c = &*ctrl;
        let (q, qd) = (read3(q), read3(qd));
        let (q_r, qd_r) = (read3(q_r), read3(qd_r));
        let mut s = [0.0; 3];
        for i in 0..3 {
            s[i] = (qd[i] - qd_r[i]) + c.gains.lambda[i] * (q[i] - q_r[i]);
        }
        let state6 = [q[0], q[1], q[2], qd[0], qd[1], qd[2]];
        let yhat = match feature_net(&c.theta.arch, &c.theta.data, &state6, c.theta.d) {
            Ok(y) => y,
            Err(e) => return fail_with(&e),
        };
        let ahat = std::slice::from_raw_parts(ahat, c.theta.d);
        match adaptation_rhs(ahat, &s, &yhat, &c.gains.p_diag, &c.potential) {
            Ok(rhs) => {
                ptr::copy_nonoverlapping(rhs.as_ptr(), dahat_out, c.theta.d);
                MdadaptStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Creates a standalone potential handle; release with
/// [`mdadapt_potential_free`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_potential_new(
    p: f64,
    epsilon: f64,
    out: *mut *mut MdadaptPotential,
) -> MdadaptStatus {
    guarded(|| match Potential::new(p, epsilon) {
        Ok(inner) => write_handle(out, MdadaptPotential { inner }),
        Err(e) => fail_with(&e),
    })
}

/// Releases a potential handle. Null is a no-op.
///
/// # Safety
/// `pot` must be null or a handle this library returned, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_potential_free(pot: *mut MdadaptPotential) {
    if !pot.is_null() {
        drop(Box::from_raw(pot));
    }
}

unsafe fn potential_args<'a>(
    pot: *const MdadaptPotential,
    a: *const f64,
    d: usize,
    out: *const f64,
) -> Result<(&'a Potential, &'a [f64]), MdadaptStatus> {
    if pot.is_null() || a.is_null() || out.is_null() {
        return Err(fail(MdadaptStatus::InvalidArgument, "null pointer"));
    }
    Ok((&(*pot).inner, std::slice::from_raw_parts(a, d)))
}

/// psi(a) for a vector of d doubles.
///
/// # Safety
/// `a` must point at d doubles and `out` at one.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_potential_value(
    pot: *const MdadaptPotential,
    a: *const f64,
    d: usize,
    out: *mut f64,
) -> MdadaptStatus {
    guarded(|| match potential_args(pot, a, d, out) {
        Ok((inner, a)) => {
            *out = inner.value(a);
            MdadaptStatus::Ok
        }
        Err(status) => status,
    })
}

/// Gradient of psi, written to d doubles at `out`.
///
/// # Safety
/// `a` and `out` must point at d doubles each.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_potential_grad(
    pot: *const MdadaptPotential,
    a: *const f64,
    d: usize,
    out: *mut f64,
) -> MdadaptStatus {
    guarded(|| match potential_args(pot, a, d, out) {
        Ok((inner, a)) => {
            let g = inner.grad(a);
            ptr::copy_nonoverlapping(g.as_ptr(), out, d);
            MdadaptStatus::Ok
        }
        Err(status) => status,
    })
}

/// Diagonal of the Hessian of psi, written to d doubles at `out`.
///
/// # Safety
/// `a` and `out` must point at d doubles each.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_potential_hess_diag(
    pot: *const MdadaptPotential,
    a: *const f64,
    d: usize,
    out: *mut f64,
) -> MdadaptStatus {
    guarded(|| match potential_args(pot, a, d, out) {
        Ok((inner, a)) => {
            let h = inner.hess_diag(a);
            ptr::copy_nonoverlapping(h.as_ptr(), out, d);
            MdadaptStatus::Ok
        }
        Err(status) => status,
    })
}

/// Bregman divergence d_psi(y || x) over vectors of d doubles.
///
/// # Safety
/// `y` and `x` must point at d doubles each and `out` at one.
#[no_mangle]
pub unsafe extern "C" fn mdadapt_potential_bregman(
    pot: *const MdadaptPotential,
    y: *const f64,
    x: *const f64,
    d: usize,
    out: *mut f64,
) -> MdadaptStatus {
    guarded(|| {
        if x.is_null() {
            return fail(MdadaptStatus::InvalidArgument, "null pointer");
        }
        match potential_args(pot, y, d, out) {
            Ok((inner, y)) => {
                let x = std::slice::from_raw_parts(x, d);
                *out = inner.bregman(y, x);
                MdadaptStatus::Ok
            }
            Err(status) => status,
        }
    })
}
