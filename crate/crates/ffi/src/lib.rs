//! C ABI for the `unident` library: opaque handles over systems and
//! controllers, JSON strings for structured results, integer status codes,
//! and a thread-local last-error message. Every entry point catches panics
//! and turns them into `UNIDENT_STATUS_PANIC` instead of unwinding across
//! the language boundary.
//!
//! Ownership rules: `*_parse` and `*_to_json` outputs are owned by the
//! caller and released with the matching `*_free` / `unident_string_free`;
//! all `free` functions accept NULL as a no-op. Matrix buffers are
//! caller-allocated, row-major, with an explicit capacity check.

// Pointer contracts (NULL handling, ownership, buffer capacities) are stated
// in each function's doc comment in prose; a literal `# Safety` heading would
// be copied verbatim into the generated C header, where Rust doc conventions
// mean nothing to the reader.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{DMatrix, DVector};
use unident::controller::{
    design_low_rank, lqr_infinite, simulate_closed_loop, LowRankController, LqrCost,
    SnapshotConfig,
};
use unident::identifiability::analyze;
use unident::numerics::Tolerances;
use unident::sensitivity::build_bundle_lti;
use unident::system_model::LtiSystem;
use unident::Error;

/// Status code returned by every fallible entry point. `UNIDENT_STATUS_OK`
/// is zero; anything else leaves a message in `unident_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnidentStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    Utf8 = 2,
    /// An internal panic was caught at the boundary.
    Panic = 3,
    /// The provided buffer is too small for the result.
    Buffer = 4,
    Shape = 10,
    InvalidMatrix = 11,
    NotStabilizable = 12,
    SingularGain = 13,
    RankDeficient = 14,
    ReducedLoopUnstable = 15,
    UnsupportedInitialState = 16,
    Eval = 17,
    Diverged = 18,
    Parse = 19,
    Io = 20,
    Json = 21,
    Csv = 22,
}

/// Opaque handle to a parameterized linear system.
pub struct UnidentSystem(LtiSystem);

/// Opaque handle to a designed feedback controller.
pub struct UnidentController(LowRankController);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = clean);
}

fn status_of(e: &Error) -> UnidentStatus {
    match e {
        Error::Shape(_) => UnidentStatus::Shape,
        Error::InvalidMatrix(_) => UnidentStatus::InvalidMatrix,
        Error::NotStabilizable { .. } => UnidentStatus::NotStabilizable,
        Error::SingularGain => UnidentStatus::SingularGain,
        Error::RankDeficient(_) => UnidentStatus::RankDeficient,
        Error::ReducedLoopUnstable { .. } => UnidentStatus::ReducedLoopUnstable,
        Error::UnsupportedInitialState => UnidentStatus::UnsupportedInitialState,
        Error::Eval(_) => UnidentStatus::Eval,
        Error::Diverged { .. } => UnidentStatus::Diverged,
        Error::Parse(_) => UnidentStatus::Parse,
        Error::Io(_) => UnidentStatus::Io,
        Error::Json(_) => UnidentStatus::Json,
        Error::Csv(_) => UnidentStatus::Csv,
    }
}

fn fail(e: &Error) -> UnidentStatus {
    set_error(&e.to_string());
    status_of(e)
}

/// Run `body` with panic containment; a caught panic reports
/// `UNIDENT_STATUS_PANIC`.
fn guarded(body: impl FnOnce() -> UnidentStatus) -> UnidentStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic across the C boundary".into());
            set_error(&msg);
            UnidentStatus::Panic
        }
    }
}

unsafe fn required_str<'a>(ptr: *const c_char) -> Result<&'a str, UnidentStatus> {
    if ptr.is_null() {
        set_error("required string argument is NULL");
        return Err(UnidentStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        UnidentStatus::Utf8
    })
}

fn give_string(out: *mut *mut c_char, text: String) -> UnidentStatus {
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            UnidentStatus::Ok
        }
        Err(_) => {
            set_error("result contained an interior NUL byte");
            UnidentStatus::Json
        }
    }
}

fn tolerances(rank_eps: f64, residual_eps: f64) -> Result<Tolerances, UnidentStatus> {
    let mut tol = Tolerances::default();
    if rank_eps > 0.0 {
        tol.rank_eps = rank_eps;
    }
    if residual_eps > 0.0 {
        tol.residual_eps = residual_eps;
    }
    tol.validate().map_err(|e| fail(&e))?;
    Ok(tol)
}

/// Fill a caller buffer with a row-major copy of `m`; `len` is the buffer
/// capacity in elements.
fn fill_matrix(m: &DMatrix<f64>, out: *mut f64, len: usize) -> UnidentStatus {
    let needed = m.nrows() * m.ncols();
    if out.is_null() {
        set_error("output buffer is NULL");
        return UnidentStatus::NullArgument;
    }
    if len < needed {
        set_error(&format!("buffer holds {len} elements, result needs {needed}"));
        return UnidentStatus::Buffer;
    }
    let slice = unsafe { std::slice::from_raw_parts_mut(out, needed) };
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            slice[i * m.ncols() + j] = m[(i, j)];
        }
    }
    UnidentStatus::Ok
}

macro_rules! try_ffi {
    ($expr:expr) => {
        match $expr {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

macro_rules! nonnull {
    ($ptr:expr, $what:literal) => {
        if $ptr.is_null() {
            set_error(concat!($what, " is NULL"));
            return UnidentStatus::NullArgument;
        }
    };
}

/// Library version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn unident_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread; never freed
/// by the caller.
#[no_mangle]
pub extern "C" fn unident_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string returned through a `char **` output.
#[no_mangle]
pub unsafe extern "C" fn unident_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a system from its JSON description (matrices `A`, `B`, `C`, the
/// free-parameter `mask`, optional `x0`).
#[no_mangle]
pub unsafe extern "C" fn unident_system_parse(
    json: *const c_char,
    out: *mut *mut UnidentSystem,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(out, "system output pointer");
        let text = try_ffi!(required_str(json));
        match LtiSystem::from_json_str(text) {
            Ok(sys) => {
                *out = Box::into_raw(Box::new(UnidentSystem(sys)));
                UnidentStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Serialize a system back to pretty JSON; release with
/// `unident_string_free`.
#[no_mangle]
pub unsafe extern "C" fn unident_system_to_json(
    sys: *const UnidentSystem,
    out: *mut *mut c_char,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(sys, "system handle");
        nonnull!(out, "string output pointer");
        match (*sys).0.to_json_pretty() {
            Ok(text) => give_string(out, text),
            Err(e) => fail(&e),
        }
    })
}

/// Release a system handle.
#[no_mangle]
pub unsafe extern "C" fn unident_system_free(sys: *mut UnidentSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Report state, input, output, and free-parameter counts. Any output
/// pointer may be NULL to skip that field.
#[no_mangle]
pub unsafe extern "C" fn unident_system_dims(
    sys: *const UnidentSystem,
    p: *mut usize,
    l: *mut usize,
    m: *mut usize,
    n_params: *mut usize,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(sys, "system handle");
        let s = &(*sys).0;
        if !p.is_null() {
            *p = s.p();
        }
        if !l.is_null() {
            *l = s.l();
        }
        if !m.is_null() {
            *m = s.m();
        }
        if !n_params.is_null() {
            *n_params = s.n_params();
        }
        UnidentStatus::Ok
    })
}

/// Decide identifiability from a logged input sequence `u` (row-major,
/// `t` steps by `l` channels). Writes the full report as JSON; release it
/// with `unident_string_free`. Pass non-positive tolerances to use the
/// defaults.
#[no_mangle]
pub unsafe extern "C" fn unident_analyze(
    sys: *const UnidentSystem,
    u: *const f64,
    t: usize,
    rank_eps: f64,
    residual_eps: f64,
    out: *mut *mut c_char,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(sys, "system handle");
        nonnull!(u, "input matrix");
        nonnull!(out, "string output pointer");
        let s = &(*sys).0;
        if t == 0 {
            set_error("input must cover at least one step");
            return UnidentStatus::Shape;
        }
        let data = std::slice::from_raw_parts(u, t * s.l());
        let u = DMatrix::from_row_slice(t, s.l(), data);
        let tol = try_ffi!(tolerances(rank_eps, residual_eps));
        let report = match build_bundle_lti(s, &u).and_then(|b| analyze(&b, &tol)) {
            Ok(report) => report,
            Err(e) => return fail(&e),
        };
        match serde_json::to_string_pretty(&report) {
            Ok(text) => give_string(out, text),
            Err(e) => fail(&Error::from(e)),
        }
    })
}

/// Design a feedback controller with scalar weights `q` (outputs) and `r`
/// (inputs). `rank` 0 picks the default order `min(l-1, p)`; the design is
/// deterministic per `seed`.
#[no_mangle]
pub unsafe extern "C" fn unident_design(
    sys: *const UnidentSystem,
    q: f64,
    r: f64,
    rank: usize,
    seed: u64,
    out: *mut *mut UnidentController,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(sys, "system handle");
        nonnull!(out, "controller output pointer");
        let s = &(*sys).0;
        let cost = match LqrCost::scalars(q, r, s.m(), s.l()) {
            Ok(cost) => cost,
            Err(e) => return fail(&e),
        };
        let snap = SnapshotConfig::default_for(s);
        let order = if rank == 0 { None } else { Some(rank) };
        match design_low_rank(s, &cost, order, &snap, seed, &Tolerances::default()) {
            Ok(ctl) => {
                *out = Box::into_raw(Box::new(UnidentController(ctl)));
                UnidentStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Parse a controller previously serialized with
/// `unident_controller_to_json`.
#[no_mangle]
pub unsafe extern "C" fn unident_controller_parse(
    json: *const c_char,
    out: *mut *mut UnidentController,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(out, "controller output pointer");
        let text = try_ffi!(required_str(json));
        match LowRankController::from_json_str(text) {
            Ok(ctl) => {
                *out = Box::into_raw(Box::new(UnidentController(ctl)));
                UnidentStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Serialize a controller to pretty JSON; release with
/// `unident_string_free`.
#[no_mangle]
pub unsafe extern "C" fn unident_controller_to_json(
    ctl: *const UnidentController,
    out: *mut *mut c_char,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(ctl, "controller handle");
        nonnull!(out, "string output pointer");
        match (*ctl).0.to_json_pretty() {
            Ok(text) => give_string(out, text),
            Err(e) => fail(&e),
        }
    })
}

/// Release a controller handle.
#[no_mangle]
pub unsafe extern "C" fn unident_controller_free(ctl: *mut UnidentController) {
    if !ctl.is_null() {
        drop(Box::from_raw(ctl));
    }
}

/// Report the feedback shape (`l` rows, `p` columns) and the controller
/// order `r`. Any output pointer may be NULL.
#[no_mangle]
pub unsafe extern "C" fn unident_controller_dims(
    ctl: *const UnidentController,
    l: *mut usize,
    p: *mut usize,
    r: *mut usize,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(ctl, "controller handle");
        let fb = (*ctl).0.effective_feedback();
        if !l.is_null() {
            *l = fb.nrows();
        }
        if !p.is_null() {
            *p = fb.ncols();
        }
        if !r.is_null() {
            *r = (*ctl).0.r;
        }
        UnidentStatus::Ok
    })
}

/// Copy the effective state-feedback matrix (`u = -F*x`, `l` by `p`,
/// row-major) into a caller buffer of capacity `len` elements.
#[no_mangle]
pub unsafe extern "C" fn unident_controller_feedback(
    ctl: *const UnidentController,
    out: *mut f64,
    len: usize,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(ctl, "controller handle");
        fill_matrix(&(*ctl).0.effective_feedback(), out, len)
    })
}

/// Solve the unrestricted infinite-horizon regulator with scalar weights
/// and copy the optimal gain (`l` by `p`, row-major) into a caller buffer
/// of capacity `len` elements.
#[no_mangle]
pub unsafe extern "C" fn unident_lqr_gain(
    sys: *const UnidentSystem,
    q: f64,
    r: f64,
    out: *mut f64,
    len: usize,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(sys, "system handle");
        let s = &(*sys).0;
        let cost = match LqrCost::scalars(q, r, s.m(), s.l()) {
            Ok(cost) => cost,
            Err(e) => return fail(&e),
        };
        match lqr_infinite(s, &cost, &Tolerances::default()) {
            Ok(sol) => fill_matrix(&sol.gain, out, len),
            Err(e) => fail(&e),
        }
    })
}

/// Simulate the closed loop `x_next = (A - B*F)*x` for `steps` steps from
/// `x0` (length `p`; NULL starts at the origin). `u_out` (`steps` by `l`)
/// and `y_out` (`steps` by `m`) are filled row-major when non-NULL;
/// `u_len` / `y_len` give their capacities in elements.
#[no_mangle]
pub unsafe extern "C" fn unident_simulate_closed(
    sys: *const UnidentSystem,
    ctl: *const UnidentController,
    x0: *const f64,
    steps: usize,
    u_out: *mut f64,
    u_len: usize,
    y_out: *mut f64,
    y_len: usize,
) -> UnidentStatus {
    guarded(|| {
        nonnull!(sys, "system handle");
        nonnull!(ctl, "controller handle");
        let s = &(*sys).0;
        let start = if x0.is_null() {
            DVector::zeros(s.p())
        } else {
            DVector::from_column_slice(std::slice::from_raw_parts(x0, s.p()))
        };
        let fb = (*ctl).0.effective_feedback();
        let traj = match simulate_closed_loop(s, &fb, &start, steps) {
            Ok(traj) => traj,
            Err(e) => return fail(&e),
        };
        if !u_out.is_null() {
            let status = fill_matrix(&traj.u, u_out, u_len);
            if status != UnidentStatus::Ok {
                return status;
            }
        }
        if !y_out.is_null() {
            let status = fill_matrix(&traj.y, y_out, y_len);
            if status != UnidentStatus::Ok {
                return status;
            }
        }
        UnidentStatus::Ok
    })
}
