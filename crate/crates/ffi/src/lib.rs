//! C interface to the loopgas engine.
//!
//! Every function returns an `LgStatus`; on failure the message is available
//! from `lg_last_error_message` on the same thread. Models are opaque handles
//! created by `lg_model_from_json` and released with `lg_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use loopgas::cluster;
use loopgas::config::ExperimentConfig;
use loopgas::geometry;
use loopgas::model::{convergence_diagnostics, ModelParams, QlVariant};
use loopgas::oracle::{self, HardCoreBasis};
use loopgas::pathint::SeriesEstimate;
use num_complex::Complex64;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Validation = 3,
    Domain = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LgMethod {
    Ed = 0,
    Direct = 1,
    Cluster = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LgNorms {
    pub m: f64,
    pub m0_re: f64,
    pub m0_im: f64,
    pub ml: f64,
    pub psi_norm: f64,
    pub psi_l_norm: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LgDiagnostics {
    pub q: f64,
    pub q_l: f64,
    pub p: f64,
    pub p_l: f64,
    pub all_satisfied: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LgEstimate {
    pub value_re: f64,
    pub value_im: f64,
    pub stat_error: f64,
    pub tail_bound: f64,
    pub exact: bool,
}

/// Opaque model handle.
pub struct LgModel {
    cfg: ExperimentConfig,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &loopgas::Error) -> LgStatus {
    match e {
        loopgas::Error::Validation(_) | loopgas::Error::Json(_) | loopgas::Error::Csv(_) => LgStatus::Validation,
        loopgas::Error::Domain(_) | loopgas::Error::Truncation(_) => LgStatus::Domain,
        loopgas::Error::Io(_) => LgStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (LgStatus, String)>) -> LgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LgStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            LgStatus::Panic
        }
    }
}

fn lift<T>(r: loopgas::Result<T>) -> Result<T, (LgStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null() -> (LgStatus, String) {
    (LgStatus::NullPointer, "null pointer argument".into())
}

fn estimate(e: &SeriesEstimate) -> LgEstimate {
    LgEstimate {
        value_re: e.value.re,
        value_im: e.value.im,
        stat_error: e.stat_error,
        tail_bound: e.tail_bound,
        exact: e.meta.exact,
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Parses an experiment configuration (JSON text) into a new model handle.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_model_from_json(json: *const c_char, out: *mut *mut LgModel) -> LgStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return Err(null());
        }
        *out = std::ptr::null_mut();
        let text = CStr::from_ptr(json).to_str().map_err(|e| (LgStatus::InvalidUtf8, e.to_string()))?;
        let (cfg, _) = lift(ExperimentConfig::load(text, &[]))?;
        let params = lift(cfg.params())?;
        *out = Box::into_raw(Box::new(LgModel { cfg, params }));
        Ok(())
    })
}

/// Releases a handle; NULL is ignored.
///
/// # Safety
/// `model` must come from `lg_model_from_json` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lg_model_free(model: *mut LgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Replaces the fugacity.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lg_model_set_fugacity(model: *mut LgModel, re: f64, im: f64) -> LgStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(null)?;
        let p = m.params.with_z(Complex64::new(re, im));
        lift(p.validate())?;
        m.params = p;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_model_norms(model: *const LgModel, out: *mut LgNorms) -> LgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        let o = out.as_mut().ok_or_else(null)?;
        let n = m.params.norms();
        *o = LgNorms { m: n.m, m0_re: n.m0.re, m0_im: n.m0.im, ml: n.ml, psi_norm: n.psi_norm, psi_l_norm: n.psi_l_norm };
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_model_diagnostics(model: *const LgModel, out: *mut LgDiagnostics) -> LgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        let o = out.as_mut().ok_or_else(null)?;
        let d = convergence_diagnostics(&m.params, QlVariant::Corrected);
        *o = LgDiagnostics { q: d.q, q_l: d.q_l, p: d.p, p_l: d.p_l, all_satisfied: d.all_satisfied() };
        Ok(())
    })
}

/// ln Z of the configured box at scale R by the chosen method.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_log_partition(model: *const LgModel, method: LgMethod, scale: f64, out: *mut LgEstimate) -> LgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        let o = out.as_mut().ok_or_else(null)?;
        let sb = lift(m.cfg.lattice_box(scale))?.site_box();
        let trunc = m.cfg.truncation;
        *o = match method {
            LgMethod::Ed => {
                let basis = lift(HardCoreBasis::from_box(&sb, m.params.d))?;
                let v = lift(oracle::log_partition_ed(&basis, &m.params, m.cfg.oracle.boundary))?;
                LgEstimate { value_re: v, exact: true, ..Default::default() }
            }
            LgMethod::Cluster => estimate(&lift(cluster::log_partition_cluster(&sb, &m.params, &trunc))?),
            LgMethod::Direct => {
                let e = lift(cluster::partition_direct(&sb, &m.params, &trunc))?;
                let a = e.value.norm();
                let l = e.value.ln();
                let tail = if e.tail_bound < a { -(1.0 - e.tail_bound / a).ln() } else { f64::INFINITY };
                LgEstimate { value_re: l.re, value_im: l.im, stat_error: e.stat_error / a, tail_bound: tail, exact: e.meta.exact }
            }
        };
        Ok(())
    })
}

/// Boundary coefficient of the given order, averaged over equivalent sets.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_coefficient(model: *const LgModel, order: u32, out: *mut LgEstimate) -> LgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        let o = out.as_mut().ok_or_else(null)?;
        if order as usize > m.params.d {
            return Err((LgStatus::Validation, format!("order {order} exceeds the dimension {}", m.params.d)));
        }
        let g = lift(geometry::geometric_coefficients(&m.params, &m.cfg.truncation))?;
        let e = g.symmetric_value(order as usize).ok_or_else(|| (LgStatus::Domain, "no such order".to_string()))?;
        *o = estimate(&e);
        Ok(())
    })
}
