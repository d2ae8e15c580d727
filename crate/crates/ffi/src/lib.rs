//! C interface to `physmeas`.
//!
//! Every function returns a [`PmStatus`]; on failure [`pm_last_error`] holds
//! the message for the calling thread. Systems are opaque handles released
//! with [`pm_system_free`]; strings returned by the library are released with
//! [`pm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use physmeas::cli::{parse_config, run_with_threads};
use physmeas::cocycle::{lyapunov_spectrum, wedge_exponent_direct, SpectrumConfig};
use physmeas::regularity::{classify_spectrum, SpectrumKind, SpectrumMode};
use physmeas::systems::{build_system, MapSystem, SystemSpec};
use physmeas::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Domain = 4,
    Catalog = 5,
    Validation = 6,
    Divergence = 7,
    Numeric = 8,
    Overflow = 9,
    Parse = 10,
    Config = 11,
    Io = 12,
    Panic = 13,
}

/// Spectrum classes reported by [`pm_classify_spectrum`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmSpectrumKind {
    UnimodalMap = 0,
    UnimodalFlow = 1,
    NonHyperbolic = 2,
    Undetermined = 3,
}

/// Opaque handle to a builtin system.
pub struct PmSystem {
    system: MapSystem,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PmStatus {
    match e.root() {
        Error::Domain(_) => PmStatus::Domain,
        Error::Catalog { .. } => PmStatus::Catalog,
        Error::Validation { .. } => PmStatus::Validation,
        Error::Divergence { .. } => PmStatus::Divergence,
        Error::Numeric(_) => PmStatus::Numeric,
        Error::Overflow { .. } => PmStatus::Overflow,
        Error::Parse { .. } => PmStatus::Parse,
        Error::Config { .. } => PmStatus::Config,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => PmStatus::Io,
        Error::Context { .. } => PmStatus::Domain,
    }
}

struct Fail(PmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PmStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PmStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn system_arg<'a>(p: *const PmSystem) -> Result<&'a MapSystem, Fail> {
    p.as_ref().map(|s| &s.system).ok_or_else(|| null("system"))
}

unsafe fn x0_arg(sys: &MapSystem, x0: *const f64, len: usize) -> Result<Vec<f64>, Fail> {
    if x0.is_null() {
        return Ok(sys.default_x0().to_vec());
    }
    if len != sys.dim() {
        return Err(Fail(
            PmStatus::Validation,
            format!("x0 has {len} coordinates, the system has {}", sys.dim()),
        ));
    }
    Ok(std::slice::from_raw_parts(x0, len).to_vec())
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null("out"));
    }
    if len < need {
        return Err(Fail(PmStatus::BufferTooSmall, format!("buffer of {len} for {need} values")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Message of the last failure on this thread; empty after a success. The
/// pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn pm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a builtin system. `keys` and `values` hold `n_params` parameter
/// overrides and may be null when `n_params` is 0.
///
/// # Safety
/// `name` and each key must be NUL-terminated; `keys` and `values` must point
/// to `n_params` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_system_new(
    name: *const c_char,
    keys: *const *const c_char,
    values: *const f64,
    n_params: usize,
    out: *mut *mut PmSystem,
) -> PmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let mut spec = SystemSpec::new(str_arg(name, "name")?);
        if n_params > 0 {
            if keys.is_null() || values.is_null() {
                return Err(null("keys/values"));
            }
            let keys = std::slice::from_raw_parts(keys, n_params);
            let values = std::slice::from_raw_parts(values, n_params);
            for (k, v) in keys.iter().zip(values) {
                spec = spec.with(str_arg(*k, "key")?, *v);
            }
        }
        let system = build_system(&spec)?;
        *out = Box::into_raw(Box::new(PmSystem { system }));
        Ok(())
    })
}

/// # Safety
/// `system` must come from [`pm_system_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pm_system_free(system: *mut PmSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `system` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pm_system_dim(system: *const PmSystem) -> usize {
    system.as_ref().map_or(0, |s| s.system.dim())
}

/// Seconds of flow time per iteration (1 for maps).
///
/// # Safety
/// `system` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pm_system_time_per_step(system: *const PmSystem) -> f64 {
    system.as_ref().map_or(f64::NAN, |s| s.system.time_per_step())
}

/// QR estimate of the full spectrum, sorted descending, per iteration for
/// maps and per unit time for flows. A null `x0` uses the system default.
///
/// # Safety
/// `x0` must be null or hold `x0_len` values; `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn pm_lyapunov_spectrum(
    system: *const PmSystem,
    x0: *const f64,
    x0_len: usize,
    n: u64,
    renorm_interval: u64,
    burn_in: u64,
    out: *mut f64,
    out_len: usize,
) -> PmStatus {
    guard(|| {
        let sys = system_arg(system)?;
        let x0 = x0_arg(sys, x0, x0_len)?;
        let out = out_slice(out, out_len, sys.dim())?;
        let config = SpectrumConfig::new(n).with_renorm_interval(renorm_interval).with_burn_in(burn_in);
        let est = lyapunov_spectrum(sys, &x0, &config)?;
        out.copy_from_slice(&est.exponents);
        Ok(())
    })
}

/// Growth rate of `‖∧^k Df^n‖` along the orbit of `x0`.
///
/// # Safety
/// `x0` must be null or hold `x0_len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_wedge_exponent(
    system: *const PmSystem,
    x0: *const f64,
    x0_len: usize,
    n: u64,
    k: usize,
    out: *mut f64,
) -> PmStatus {
    guard(|| {
        let sys = system_arg(system)?;
        let x0 = x0_arg(sys, x0, x0_len)?;
        let out = out_slice(out, 1, 1)?;
        out[0] = wedge_exponent_direct(sys, &x0, n, k)?;
        Ok(())
    })
}

/// Classifies a descending spectrum. `out_k` receives the unstable index for
/// unimodal classes and 0 otherwise.
///
/// # Safety
/// `exponents` must hold `len` values; `out_kind` and `out_k` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_classify_spectrum(
    exponents: *const f64,
    len: usize,
    flow: bool,
    c0: f64,
    zero_tol: f64,
    out_kind: *mut PmSpectrumKind,
    out_k: *mut usize,
) -> PmStatus {
    guard(|| {
        if exponents.is_null() || out_kind.is_null() || out_k.is_null() {
            return Err(null("exponents/out_kind/out_k"));
        }
        let e = std::slice::from_raw_parts(exponents, len);
        let mode = if flow { SpectrumMode::Flow } else { SpectrumMode::Map };
        let class = classify_spectrum(e, mode, c0, zero_tol)?;
        let (kind, k) = match class.kind {
            SpectrumKind::UnimodalMap(k) => (PmSpectrumKind::UnimodalMap, k),
            SpectrumKind::UnimodalFlow(k) => (PmSpectrumKind::UnimodalFlow, k),
            SpectrumKind::NonHyperbolic => (PmSpectrumKind::NonHyperbolic, 0),
            SpectrumKind::Undetermined => (PmSpectrumKind::Undetermined, 0),
        };
        *out_kind = kind;
        *out_k = k;
        Ok(())
    })
}

/// Runs a TOML run description on `threads` workers (0 picks one) and
/// returns the JSON report in `out_json`. Release it with [`pm_string_free`].
///
/// # Safety
/// `config_toml` must be NUL-terminated; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_run_config(
    config_toml: *const c_char,
    threads: usize,
    out_json: *mut *mut c_char,
) -> PmStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        *out_json = ptr::null_mut();
        let config = parse_config(str_arg(config_toml, "config_toml")?)?;
        let output = run_with_threads(&config, threads.max(1))?;
        let bytes = output
            .file("report.json")
            .ok_or_else(|| Fail(PmStatus::Config, "output.formats excludes json".into()))?;
        let text = CString::new(bytes.to_vec()).map_err(|_| Fail(PmStatus::Io, "report contains NUL".into()))?;
        *out_json = text.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
