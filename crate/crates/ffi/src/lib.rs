//! C ABI over `pfsearch`.
//!
//! Systems and normalized systems are opaque handles owned by the caller and
//! released with their `_free` functions. Every fallible call returns a
//! [`PfsStatus`]; on failure [`pfs_last_error`] describes the cause on the
//! calling thread. Panics are caught at the boundary and reported as
//! [`PfsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use pfsearch::baseline::BaselineReport;
use pfsearch::nalgebra::DMatrix;
use pfsearch::normalization::{normalize, NormalizedSystem, ScalingOptions};
use pfsearch::oracle::{count_real_solutions, OracleOptions};
use pfsearch::quadric::QuadricSystem;
use pfsearch::reward::{reward_pipeline, RewardConfig};
use pfsearch::seeding::rng_from;
use pfsearch::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PfsStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or malformed JSON.
    InvalidArgument = 1,
    /// Input rejected by validation.
    Validation = 2,
    /// Numerical failure such as non-convergence or a degenerate system.
    Numerical = 3,
    /// Dimension above the root oracle's limit.
    Refused = 4,
    Panic = 5,
}

/// Opaque quadric system.
pub struct PfsSystem(QuadricSystem);

/// Opaque normalized system.
pub struct PfsNormalized(NormalizedSystem);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PfsScalingDiagnostics {
    pub trace_distance: f64,
    pub summation_distance: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PfsRewardOptions {
    pub delta: f64,
    pub num_points: usize,
    pub num_tuples: usize,
    /// Annulus tolerance; zero or negative selects the automatic value.
    pub epsilon: f64,
    pub seed: u64,
    pub workers: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PfsRewardResult {
    pub value: f64,
    pub std_error: f64,
    pub log_value: f64,
    pub accepted_points: usize,
    pub degenerate: bool,
    pub not_converged: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PfsBaseline {
    pub expected_count: f64,
    pub absdet_projected: f64,
    pub sphere_area: f64,
    pub log_gaussian_tail_moment: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PfsStatus {
    match e.exit_code() {
        2 => PfsStatus::Validation,
        4 => PfsStatus::Refused,
        _ => PfsStatus::Numerical,
    }
}

struct Fail(PfsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(PfsStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PfsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PfsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside pfsearch");
            PfsStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    // SAFETY: the caller guarantees `p` is null or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| invalid(&format!("{name} is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: the caller guarantees `p` is null or valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| invalid(&format!("{name} is null")))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pfs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn pfs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a system from `dim` row-major `dim x dim` factors laid out back to
/// back (`dim^3` values) and `dim` right-hand sides.
///
/// # Safety
/// `factors` must point to `dim^3` doubles, `rhs` to `dim` doubles and
/// `out_system` to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn pfs_system_new(
    dim: usize,
    factors: *const f64,
    rhs: *const f64,
    out_system: *mut *mut PfsSystem,
) -> PfsStatus {
    guard(|| {
        let slot = unsafe { out(out_system, "out_system") }?;
        if factors.is_null() || rhs.is_null() {
            return Err(invalid("factors and rhs must be non-null"));
        }
        let total = dim.checked_mul(dim).and_then(|d| d.checked_mul(dim)).ok_or_else(|| invalid("dim is too large"))?;
        // SAFETY: lengths are part of the documented contract.
        let (f, r) = unsafe { (std::slice::from_raw_parts(factors, total), std::slice::from_raw_parts(rhs, dim)) };
        let mats = f.chunks(dim * dim).map(|c| DMatrix::from_row_slice(dim, dim, c)).collect();
        let sys = QuadricSystem::new(mats, r.to_vec())?;
        *slot = Box::into_raw(Box::new(PfsSystem(sys)));
        Ok(())
    })
}

/// Parses `{"dim": n, "factors": [...], "rhs": [...]}`.
///
/// # Safety
/// `json` must be a nul-terminated string and `out_system` writable.
#[no_mangle]
pub unsafe extern "C" fn pfs_system_from_json(json: *const c_char, out_system: *mut *mut PfsSystem) -> PfsStatus {
    guard(|| {
        let slot = unsafe { out(out_system, "out_system") }?;
        if json.is_null() {
            return Err(invalid("json is null"));
        }
        // SAFETY: nul-terminated by contract.
        let text = unsafe { CStr::from_ptr(json) }.to_str().map_err(|_| invalid("json is not UTF-8"))?;
        let sys: QuadricSystem = serde_json::from_str(text).map_err(|e| invalid(&e.to_string()))?;
        *slot = Box::into_raw(Box::new(PfsSystem(sys)));
        Ok(())
    })
}

/// Serializes a system; release the string with [`pfs_string_free`].
///
/// # Safety
/// `system` must be a live handle and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn pfs_system_to_json(system: *const PfsSystem, out_json: *mut *mut c_char) -> PfsStatus {
    guard(|| {
        let sys = unsafe { deref(system, "system") }?;
        let slot = unsafe { out(out_json, "out_json") }?;
        let text = serde_json::to_string(&sys.0).map_err(|e| Fail(PfsStatus::Numerical, e.to_string()))?;
        *slot = CString::new(text).expect("JSON has no nul bytes").into_raw();
        Ok(())
    })
}

/// Gaussian factors with standard deviation `sigma` and unit right-hand sides.
///
/// # Safety
/// `out_system` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pfs_system_random_gaussian(n: usize, sigma: f64, seed: u64, out_system: *mut *mut PfsSystem) -> PfsStatus {
    guard(|| {
        let slot = unsafe { out(out_system, "out_system") }?;
        if n == 0 || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Fail(PfsStatus::Validation, "need n >= 1 and a positive finite sigma".into()));
        }
        let sys = QuadricSystem::random_gaussian(n, sigma, &mut rng_from(seed, &[]));
        *slot = Box::into_raw(Box::new(PfsSystem(sys)));
        Ok(())
    })
}

/// Dimension of a system, or 0 for a null handle.
///
/// # Safety
/// `system` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pfs_system_dim(system: *const PfsSystem) -> usize {
    unsafe { system.as_ref() }.map_or(0, |s| s.0.dim())
}

/// # Safety
/// `system` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pfs_system_free(system: *mut PfsSystem) {
    if !system.is_null() {
        // SAFETY: allocated by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(system) });
    }
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn pfs_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: allocated by CString::into_raw in this library.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Scales a system to unit-trace factors summing to the identity.
///
/// # Safety
/// `system` must be a live handle and `out_normalized` writable.
#[no_mangle]
pub unsafe extern "C" fn pfs_normalize(
    system: *const PfsSystem,
    gradient_tolerance: f64,
    max_iterations: usize,
    corrector_steps: usize,
    out_normalized: *mut *mut PfsNormalized,
) -> PfsStatus {
    guard(|| {
        let sys = unsafe { deref(system, "system") }?;
        let slot = unsafe { out(out_normalized, "out_normalized") }?;
        let opts = ScalingOptions { gradient_tolerance, max_iterations, corrector_steps, initial_t: None };
        *slot = Box::into_raw(Box::new(PfsNormalized(normalize(&sys.0, &opts)?)));
        Ok(())
    })
}

/// # Safety
/// `normalized` must be a live handle and `out_diagnostics` writable.
#[no_mangle]
pub unsafe extern "C" fn pfs_normalized_diagnostics(
    normalized: *const PfsNormalized,
    out_diagnostics: *mut PfsScalingDiagnostics,
) -> PfsStatus {
    guard(|| {
        let ns = unsafe { deref(normalized, "normalized") }?;
        let slot = unsafe { out(out_diagnostics, "out_diagnostics") }?;
        let d = &ns.0.diagnostics;
        *slot = PfsScalingDiagnostics {
            trace_distance: d.trace_distance,
            summation_distance: d.summation_distance,
            gradient_norm: d.gradient_norm,
            iterations: d.iterations,
            converged: d.converged,
        };
        Ok(())
    })
}

/// Copies the `dim` weights (summing to `dim`) into `out_weights`.
///
/// # Safety
/// `normalized` must be a live handle and `out_weights` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pfs_normalized_weights(normalized: *const PfsNormalized, out_weights: *mut f64, len: usize) -> PfsStatus {
    guard(|| {
        let ns = unsafe { deref(normalized, "normalized") }?;
        if out_weights.is_null() || len != ns.0.dim {
            return Err(invalid("out_weights must hold exactly dim values"));
        }
        // SAFETY: checked non-null, length by contract.
        unsafe { std::slice::from_raw_parts_mut(out_weights, len) }.copy_from_slice(&ns.0.weights);
        Ok(())
    })
}

/// # Safety
/// `normalized` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pfs_normalized_free(normalized: *mut PfsNormalized) {
    if !normalized.is_null() {
        // SAFETY: allocated by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(normalized) });
    }
}

/// Default reward options.
#[no_mangle]
pub extern "C" fn pfs_reward_options_default() -> PfsRewardOptions {
    let d = RewardConfig::default();
    PfsRewardOptions {
        delta: d.delta,
        num_points: d.num_points,
        num_tuples: d.num_tuples,
        epsilon: 0.0,
        seed: d.seed,
        workers: d.workers,
    }
}

/// Normalizes `system` and estimates its expected real solution count.
///
/// # Safety
/// `system` and `options` must be valid and `out_result` writable.
#[no_mangle]
pub unsafe extern "C" fn pfs_reward(
    system: *const PfsSystem,
    options: *const PfsRewardOptions,
    out_result: *mut PfsRewardResult,
) -> PfsStatus {
    guard(|| {
        let sys = unsafe { deref(system, "system") }?;
        let o = *unsafe { deref(options, "options") }?;
        let slot = unsafe { out(out_result, "out_result") }?;
        let cfg = RewardConfig {
            delta: o.delta,
            num_points: o.num_points,
            num_tuples: o.num_tuples,
            epsilon: (o.epsilon > 0.0).then_some(o.epsilon),
            seed: o.seed,
            workers: o.workers,
            ..Default::default()
        };
        cfg.validate(sys.0.dim())?;
        let est = reward_pipeline(&sys.0, &cfg)?;
        *slot = PfsRewardResult {
            value: est.value,
            std_error: est.std_error,
            log_value: est.log_value,
            accepted_points: est.accepted_points,
            degenerate: est.degenerate,
            not_converged: est.not_converged,
        };
        Ok(())
    })
}

/// Counts real solutions. `starts == 0` selects the default start count.
///
/// # Safety
/// `system` must be a live handle; `out_count` and `out_exhaustive` writable.
#[no_mangle]
pub unsafe extern "C" fn pfs_count(
    system: *const PfsSystem,
    starts: usize,
    seed: u64,
    max_dim: usize,
    out_count: *mut usize,
    out_exhaustive: *mut bool,
) -> PfsStatus {
    guard(|| {
        let sys = unsafe { deref(system, "system") }?;
        let count = unsafe { out(out_count, "out_count") }?;
        let exhaustive = unsafe { out(out_exhaustive, "out_exhaustive") }?;
        let opts = OracleOptions { starts: (starts > 0).then_some(starts), seed, max_dim, ..Default::default() };
        let res = count_real_solutions(&sys.0, &opts)?;
        *count = res.count;
        *exhaustive = res.exhaustive;
        Ok(())
    })
}

/// Closed-form Gaussian averages for dimension `n`.
///
/// # Safety
/// `out_baseline` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pfs_baseline(n: usize, out_baseline: *mut PfsBaseline) -> PfsStatus {
    guard(|| {
        let slot = unsafe { out(out_baseline, "out_baseline") }?;
        let r = BaselineReport::new(n)?;
        *slot = PfsBaseline {
            expected_count: r.expected_count,
            absdet_projected: r.absdet_projected,
            sphere_area: r.sphere_area,
            log_gaussian_tail_moment: r.gaussian_tail_moment,
        };
        Ok(())
    })
}
