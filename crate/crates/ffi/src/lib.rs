//! C ABI over the scenario loader, the allocation solver, the channel
//! formulas and the slot environment.
//!
//! Objects are opaque heap handles released with the matching `_free`
//! function. Every fallible call returns a [`LaenetStatus`]; on failure the
//! message is available from [`laenet_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use laenet::arpo::{arpo_solve, ArpoError, ArpoInstance, ArpoSolution};
use laenet::channel::{rate_bps, snr};
use laenet::env::{Action, Env, EnvError};
use laenet::scenario::Scenario;
use laenet::uplink::static_uplink_time;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaenetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Infeasible = 4,
    OutOfRange = 5,
    EpisodeFinished = 6,
    Internal = 7,
}

pub struct LaenetScenario(Scenario);

pub struct LaenetSolution(ArpoSolution);

pub struct LaenetEnv(Env);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn fail(status: LaenetStatus, msg: impl Into<String>) -> LaenetStatus {
    set_error(msg);
    status
}

/// Runs `f`, mapping panics to `Internal`, and clears the error on success.
fn guard(f: impl FnOnce() -> LaenetStatus) -> LaenetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == LaenetStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(LaenetStatus::Internal, "internal panic"),
    }
}

fn arpo_status(e: &ArpoError) -> LaenetStatus {
    match e {
        ArpoError::Infeasible { .. } => LaenetStatus::Infeasible,
        _ => LaenetStatus::InvalidArgument,
    }
}

macro_rules! deref {
    ($p:expr) => {
        match unsafe { $p.as_ref() } {
            Some(v) => v,
            None => return fail(LaenetStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

macro_rules! deref_mut {
    ($p:expr) => {
        match unsafe { $p.as_mut() } {
            Some(v) => v,
            None => return fail(LaenetStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn laenet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn laenet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn laenet_scenario_default(out: *mut *mut LaenetScenario) -> LaenetStatus {
    guard(|| {
        let out = deref_mut!(out);
        *out = Box::into_raw(Box::new(LaenetScenario(laenet::default_scenario())));
        LaenetStatus::Ok
    })
}

/// Parse and validate a scenario from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_scenario_from_toml(toml: *const c_char, out: *mut *mut LaenetScenario) -> LaenetStatus {
    guard(|| {
        if toml.is_null() {
            return fail(LaenetStatus::NullPointer, "toml is null");
        }
        let out = deref_mut!(out);
        let text = match unsafe { CStr::from_ptr(toml) }.to_str() {
            Ok(t) => t,
            Err(e) => return fail(LaenetStatus::Parse, format!("not UTF-8: {e}")),
        };
        match Scenario::from_toml(text) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(LaenetScenario(s)));
                LaenetStatus::Ok
            }
            Err(e) => fail(LaenetStatus::Parse, e.to_string()),
        }
    })
}

/// # Safety
/// `s` must come from a scenario constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn laenet_scenario_free(s: *mut LaenetScenario) {
    if !s.is_null() {
        drop(unsafe { Box::from_raw(s) });
    }
}

/// # Safety
/// `s` must be a live scenario handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_scenario_num_users(s: *const LaenetScenario, out: *mut usize) -> LaenetStatus {
    guard(|| {
        let s = deref!(s);
        *deref_mut!(out) = s.0.num_users();
        LaenetStatus::Ok
    })
}

/// Solve resolutions and powers at `pose` (x, y, z in m; the scenario start
/// pose when null). A negative `zeta` keeps the scenario's own weight.
///
/// # Safety
/// `s` live; `pose` null or three readable doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_arpo_solve(
    s: *const LaenetScenario,
    zeta: f64,
    pose: *const f64,
    out: *mut *mut LaenetSolution,
) -> LaenetStatus {
    guard(|| {
        let s = deref!(s);
        let out = deref_mut!(out);
        let mut sc = s.0.clone();
        if zeta.is_nan() {
            return fail(LaenetStatus::InvalidArgument, "zeta is NaN");
        }
        if zeta >= 0.0 {
            sc.zeta = zeta;
        }
        let pose = if pose.is_null() {
            sc.uav_start
        } else {
            let p = unsafe { std::slice::from_raw_parts(pose, 3) };
            [p[0], p[1], p[2]]
        };
        let sol = ArpoInstance::from_scenario(&sc, pose).and_then(|i| arpo_solve(&i));
        match sol {
            Ok(sol) => {
                *out = Box::into_raw(Box::new(LaenetSolution(sol)));
                LaenetStatus::Ok
            }
            Err(e) => fail(arpo_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `s` must come from `laenet_arpo_solve` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn laenet_solution_free(s: *mut LaenetSolution) {
    if !s.is_null() {
        drop(unsafe { Box::from_raw(s) });
    }
}

/// # Safety
/// `s` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_solution_num_users(s: *const LaenetSolution, out: *mut usize) -> LaenetStatus {
    guard(|| {
        *deref_mut!(out) = deref!(s).0.power_per_user.len();
        LaenetStatus::Ok
    })
}

/// Transmit power of user `idx` in W.
///
/// # Safety
/// `s` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_solution_power(s: *const LaenetSolution, idx: usize, out: *mut f64) -> LaenetStatus {
    guard(|| {
        let s = deref!(s);
        let out = deref_mut!(out);
        match s.0.power_per_user.get(idx) {
            Some(p) => {
                *out = *p;
                LaenetStatus::Ok
            }
            None => fail(LaenetStatus::OutOfRange, format!("user index {idx} out of range")),
        }
    })
}

/// Image resolution of user `idx` as a pixel count.
///
/// # Safety
/// `s` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_solution_resolution(s: *const LaenetSolution, idx: usize, out: *mut u64) -> LaenetStatus {
    guard(|| {
        let s = deref!(s);
        let out = deref_mut!(out);
        match s.0.res_per_user.get(idx) {
            Some(r) => {
                *out = r.pixels();
                LaenetStatus::Ok
            }
            None => fail(LaenetStatus::OutOfRange, format!("user index {idx} out of range")),
        }
    })
}

/// Largest per-user latency of the allocation, s.
///
/// # Safety
/// `s` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_solution_max_latency(s: *const LaenetSolution, out: *mut f64) -> LaenetStatus {
    guard(|| {
        *deref_mut!(out) = deref!(s).0.max_latency();
        LaenetStatus::Ok
    })
}

/// # Safety
/// `s` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_solution_total_power(s: *const LaenetSolution, out: *mut f64) -> LaenetStatus {
    guard(|| {
        *deref_mut!(out) = deref!(s).0.total_power();
        LaenetStatus::Ok
    })
}

/// # Safety
/// `s` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_solution_objective(s: *const LaenetSolution, out: *mut f64) -> LaenetStatus {
    guard(|| {
        *deref_mut!(out) = deref!(s).0.objective_value;
        LaenetStatus::Ok
    })
}

/// Shannon rate B log2(1 + P g / σ²) in bit/s.
///
/// # Safety
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_rate_bps(p_w: f64, gain: f64, noise_w: f64, bandwidth_hz: f64, out: *mut f64) -> LaenetStatus {
    guard(|| {
        let out = deref_mut!(out);
        if !(p_w >= 0.0 && gain >= 0.0 && noise_w > 0.0 && bandwidth_hz > 0.0) {
            return fail(LaenetStatus::InvalidArgument, "need p, gain >= 0 and noise, bandwidth > 0");
        }
        *out = rate_bps(bandwidth_hz, snr(p_w, gain, noise_w));
        LaenetStatus::Ok
    })
}

/// Upload time of `payload_bits` at a constant rate, s.
///
/// # Safety
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_static_uplink_time(
    payload_bits: f64,
    bandwidth_hz: f64,
    p_w: f64,
    gain: f64,
    noise_w: f64,
    out: *mut f64,
) -> LaenetStatus {
    guard(|| {
        let out = deref_mut!(out);
        if !(payload_bits >= 0.0 && noise_w > 0.0 && bandwidth_hz > 0.0) {
            return fail(LaenetStatus::InvalidArgument, "need payload >= 0 and noise, bandwidth > 0");
        }
        match static_uplink_time(payload_bits, bandwidth_hz, p_w, gain, noise_w) {
            Ok(t) => {
                *out = t;
                LaenetStatus::Ok
            }
            Err(e) => fail(LaenetStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// New episode over a fixed allocation. Both inputs are copied.
///
/// # Safety
/// `s`, `sol` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_env_new(
    s: *const LaenetScenario,
    sol: *const LaenetSolution,
    seed: u64,
    out: *mut *mut LaenetEnv,
) -> LaenetStatus {
    guard(|| {
        let s = deref!(s);
        let sol = deref!(sol);
        let out = deref_mut!(out);
        match Env::reset(&s.0, &sol.0, seed) {
            Ok(env) => {
                *out = Box::into_raw(Box::new(LaenetEnv(env)));
                LaenetStatus::Ok
            }
            Err(e) => fail(LaenetStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `e` must come from `laenet_env_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn laenet_env_free(e: *mut LaenetEnv) {
    if !e.is_null() {
        drop(unsafe { Box::from_raw(e) });
    }
}

/// Advance one slot with displacement (dx, dy, dz) in m; out-of-range moves
/// are clipped. `reward` and `done` may be null.
///
/// # Safety
/// `e` live; `reward`, `done` null or writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_env_step(
    e: *mut LaenetEnv,
    dx: f64,
    dy: f64,
    dz: f64,
    reward: *mut f64,
    done: *mut bool,
) -> LaenetStatus {
    guard(|| {
        let e = deref_mut!(e);
        match e.0.step(Action::new(dx, dy, dz)) {
            Ok(o) => {
                if let Some(r) = unsafe { reward.as_mut() } {
                    *r = o.reward;
                }
                if let Some(d) = unsafe { done.as_mut() } {
                    *d = o.done;
                }
                LaenetStatus::Ok
            }
            Err(EnvError::Finished) => fail(LaenetStatus::EpisodeFinished, "episode already finished"),
            Err(err) => fail(LaenetStatus::Internal, err.to_string()),
        }
    })
}

/// Current UAV pose into `out[0..3]`.
///
/// # Safety
/// `e` live; `out` points to three writable doubles.
#[no_mangle]
pub unsafe extern "C" fn laenet_env_pose(e: *const LaenetEnv, out: *mut f64) -> LaenetStatus {
    guard(|| {
        let e = deref!(e);
        if out.is_null() {
            return fail(LaenetStatus::NullPointer, "out is null");
        }
        let p = e.0.pose();
        unsafe { ptr::copy_nonoverlapping(p.as_ptr(), out, 3) };
        LaenetStatus::Ok
    })
}

/// Max latency of a finished episode, s.
///
/// # Safety
/// `e` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn laenet_env_max_latency(e: *const LaenetEnv, out: *mut f64) -> LaenetStatus {
    guard(|| {
        let e = deref!(e);
        let out = deref_mut!(out);
        match e.0.log().max_latency() {
            Some(l) => {
                *out = l;
                LaenetStatus::Ok
            }
            None => fail(LaenetStatus::InvalidArgument, "episode is still running"),
        }
    })
}
