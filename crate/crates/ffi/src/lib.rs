//! C interface to `prt_core`.
//!
//! Objects cross the boundary as opaque handles created by a `*_new`/`*_build`
//! call and released with the matching `*_free`. Every fallible function
//! returns a [`PrtStatus`]; on failure a message is available from
//! [`prt_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use prt_core::cli::ExperimentConfig;
use prt_core::envs::TaskFamily;
use prt_core::pipeline::{comblock_family, run_offline_cell, tabular_seed_report, SourceStage};
use prt_core::uncertainty::EpsilonParams;
use prt_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Stage = 4,
    Io = 5,
    Panic = 6,
}

/// Experiment configuration.
pub struct PrtExperiment {
    config: ExperimentConfig,
}

/// A generated comblock family.
pub struct PrtFamily {
    family: TaskFamily,
}

/// Source data, learned representation and ε model for one `(seed, N_S)`.
pub struct PrtStage {
    stage: SourceStage,
    seed: u64,
}

/// Evaluation rewards of the three offline planners on one cell.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrtCellResult {
    pub prt_mean: f64,
    pub prt_stderr: f64,
    pub lcb_mean: f64,
    pub lcb_stderr: f64,
    pub lsvi_mean: f64,
    pub lsvi_stderr: f64,
}

/// Inputs of the pointwise transfer-error bound.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrtEpsilonParams {
    pub alpha_max: f64,
    pub num_sources: usize,
    pub n_source: usize,
    pub dim: usize,
    pub delta: f64,
    pub log_phi: f64,
    pub log_upsilon: f64,
}

/// Outcome of the tabular checks on one seed.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrtTabularCheck {
    pub average_error_holds: bool,
    pub target_covered: usize,
    pub target_total: usize,
    pub local_covered: usize,
    pub local_total: usize,
    pub pessimism_holds: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> PrtStatus {
    match err {
        Error::Config(_) => PrtStatus::Config,
        Error::Contract(_) => PrtStatus::InvalidArgument,
        Error::Io(_) => PrtStatus::Io,
        _ => PrtStatus::Stage,
    }
}

/// Runs `f`, turning errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), PrtStatus>) -> PrtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrtStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            PrtStatus::Panic
        }
    }
}

fn fail(err: Error) -> PrtStatus {
    set_error(err.to_string());
    status_of(&err)
}

fn null(name: &str) -> PrtStatus {
    set_error(format!("{name} is null"));
    PrtStatus::NullPointer
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn prt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default comblock experiment.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn prt_experiment_new(out: *mut *mut PrtExperiment) -> PrtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let handle = Box::new(PrtExperiment {
            config: ExperimentConfig::default(),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Experiment from a JSON config document; missing fields take defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` valid for one handle.
#[no_mangle]
pub unsafe extern "C" fn prt_experiment_from_json(
    json: *const c_char,
    out: *mut *mut PrtExperiment,
) -> PrtStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| fail(Error::Config(e.to_string())))?;
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| fail(Error::Config(e.to_string())))?;
        config.validate().map_err(fail)?;
        *out = Box::into_raw(Box::new(PrtExperiment { config }));
        Ok(())
    })
}

/// # Safety
/// `exp` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prt_experiment_free(exp: *mut PrtExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// # Safety
/// `exp` must be a live handle and `out` valid for one handle.
#[no_mangle]
pub unsafe extern "C" fn prt_family_generate(
    exp: *const PrtExperiment,
    seed: u64,
    out: *mut *mut PrtFamily,
) -> PrtStatus {
    guard(|| {
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let family = comblock_family(&exp.config.settings(), seed).map_err(fail)?;
        *out = Box::into_raw(Box::new(PrtFamily { family }));
        Ok(())
    })
}

/// Serialized family as a newly allocated string; release it with
/// [`prt_string_free`].
///
/// # Safety
/// `family` must be a live handle and `out` valid for one pointer.
#[no_mangle]
pub unsafe extern "C" fn prt_family_to_json(
    family: *const PrtFamily,
    out: *mut *mut c_char,
) -> PrtStatus {
    guard(|| {
        let family = family.as_ref().ok_or_else(|| null("family"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let text = family.family.to_json().map_err(fail)?;
        *out = CString::new(text)
            .map_err(|e| fail(Error::Format(e.to_string())))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `family` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prt_family_free(family: *mut PrtFamily) {
    if !family.is_null() {
        drop(Box::from_raw(family));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Collects source data, learns the representation and builds the ε model.
///
/// # Safety
/// `exp` must be a live handle and `out` valid for one handle.
#[no_mangle]
pub unsafe extern "C" fn prt_stage_build(
    exp: *const PrtExperiment,
    seed: u64,
    n_source: usize,
    out: *mut *mut PrtStage,
) -> PrtStatus {
    guard(|| {
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if n_source == 0 {
            set_error("n_source must be positive");
            return Err(PrtStatus::InvalidArgument);
        }
        let stage = SourceStage::build(&exp.config.settings(), n_source, seed).map_err(fail)?;
        *out = Box::into_raw(Box::new(PrtStage { stage, seed }));
        Ok(())
    })
}

/// Feature-map index chosen at step `h` (1-based).
///
/// # Safety
/// `stage` must be a live handle and `out` valid for one value.
#[no_mangle]
pub unsafe extern "C" fn prt_stage_chosen_map(
    stage: *const PrtStage,
    h: usize,
    out: *mut usize,
) -> PrtStatus {
    guard(|| {
        let stage = stage.as_ref().ok_or_else(|| null("stage"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if h == 0 || h > stage.stage.rep.horizon() {
            set_error(format!("step {h} out of range"));
            return Err(PrtStatus::InvalidArgument);
        }
        *out = stage.stage.rep.phi_index(h);
        Ok(())
    })
}

/// Whether every step picked a relabelling of the exact decoder.
///
/// # Safety
/// `stage` must be a live handle and `out` valid for one value.
#[no_mangle]
pub unsafe extern "C" fn prt_stage_recovered_decoder(
    stage: *const PrtStage,
    out: *mut bool,
) -> PrtStatus {
    guard(|| {
        let stage = stage.as_ref().ok_or_else(|| null("stage"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = stage.stage.recovered_decoder();
        Ok(())
    })
}

/// Plans PRT, RT-LSVI-LCB and RT-LSVI on `n` target trajectories and
/// evaluates each.
///
/// # Safety
/// `stage` and `exp` must be live handles and `out` valid for one result.
#[no_mangle]
pub unsafe extern "C" fn prt_stage_run_cell(
    stage: *const PrtStage,
    exp: *const PrtExperiment,
    n: usize,
    out: *mut PrtCellResult,
) -> PrtStatus {
    guard(|| {
        let stage = stage.as_ref().ok_or_else(|| null("stage"))?;
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 {
            set_error("n must be positive");
            return Err(PrtStatus::InvalidArgument);
        }
        let cell =
            run_offline_cell(&stage.stage, &exp.config.settings(), n, stage.seed).map_err(fail)?;
        *out = PrtCellResult {
            prt_mean: cell.prt.mean,
            prt_stderr: cell.prt.stderr,
            lcb_mean: cell.lcb.mean,
            lcb_stderr: cell.lcb.stderr,
            lsvi_mean: cell.lsvi.mean,
            lsvi_stderr: cell.lsvi.stderr,
        };
        Ok(())
    })
}

/// # Safety
/// `stage` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prt_stage_free(stage: *mut PrtStage) {
    if !stage.is_null() {
        drop(Box::from_raw(stage));
    }
}

/// Transfer-error bound at effective density `d_h`, clipped to 1.
///
/// # Safety
/// `params` must point to one readable struct and `out` to one writable value.
#[no_mangle]
pub unsafe extern "C" fn prt_epsilon_bound(
    params: *const PrtEpsilonParams,
    d_h: f64,
    out: *mut f64,
) -> PrtStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !(d_h > 0.0 && d_h <= 1.0) {
            set_error("d_h must lie in (0,1]");
            return Err(PrtStatus::InvalidArgument);
        }
        let params = EpsilonParams {
            alpha_max: p.alpha_max,
            num_sources: p.num_sources,
            n_source: p.n_source,
            dim: p.dim,
            delta: p.delta,
            log_phi: p.log_phi,
            log_upsilon: p.log_upsilon,
        };
        params.validate().map_err(fail)?;
        *out = params.bound(d_h).value;
        Ok(())
    })
}

/// Runs the tabular bound checks of the experiment's validation setting on
/// one seed.
///
/// # Safety
/// `exp` must be a live handle and `out` valid for one result.
#[no_mangle]
pub unsafe extern "C" fn prt_tabular_check(
    exp: *const PrtExperiment,
    seed: u64,
    out: *mut PrtTabularCheck,
) -> PrtStatus {
    guard(|| {
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = tabular_seed_report(&exp.config.tabular, seed).map_err(fail)?;
        *out = PrtTabularCheck {
            average_error_holds: r.average_error_holds(),
            target_covered: r.target_error_covered(),
            target_total: r.target_errors.len(),
            local_covered: r.local_error_covered(),
            local_total: r.local_errors_bounded.len(),
            pessimism_holds: r.pessimism_holds(),
        };
        Ok(())
    })
}
