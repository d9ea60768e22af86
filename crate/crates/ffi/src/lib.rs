//! C interface to `fhmm-sdp`.
//!
//! Objects cross the boundary as opaque handles created and destroyed by
//! this library. Every fallible call returns an [`FhmmSdpStatus`]; the text
//! of the most recent failure on the calling thread is available from
//! [`fhmm_sdp_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fhmm_sdp::admm::{solve, SolverConfig};
use fhmm_sdp::error::FhmmError;
use fhmm_sdp::exact::exact_map_viterbi;
use fhmm_sdp::model::{self, EdgeMode, ObservationTrace, StateSequence};
use fhmm_sdp::relaxation::build;
use fhmm_sdp::rounding::{admm_rr, naive_round, RoundingConfig};

/// Status codes; the non-zero values match the command-line exit codes
/// where they overlap.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhmmSdpStatus {
    Ok = 0,
    Capacity = 2,
    InvalidInput = 3,
    Numerical = 4,
    NullPointer = 5,
    Panic = 6,
}

/// Inference method for [`fhmm_sdp_infer`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhmmSdpMethod {
    /// Relaxation with argmax rounding.
    Admm = 0,
    /// Relaxation with randomized rounding and greedy descent.
    AdmmRr = 1,
    /// Joint-state dynamic programming.
    Exact = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FhmmSdpInferOptions {
    pub method: FhmmSdpMethod,
    pub mu_step: f64,
    pub max_sweeps: usize,
    pub tolerance: f64,
    pub samples_per_window: usize,
    pub trigger_period: usize,
    pub seed: u64,
    /// Non-zero adds the edge-matching cost.
    pub use_edges: i32,
}

pub struct FhmmSdpModel(model::FhmmModel);

pub struct FhmmSdpTrace(ObservationTrace);

pub struct FhmmSdpResult {
    states: StateSequence,
    objective: f64,
    relaxed_objective: f64,
    converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &FhmmError) -> FhmmSdpStatus {
    match err.exit_code() {
        2 => FhmmSdpStatus::Capacity,
        4 => FhmmSdpStatus::Numerical,
        _ => FhmmSdpStatus::InvalidInput,
    }
}

/// Runs `f`, recording failures and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (FhmmSdpStatus, String)>) -> FhmmSdpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FhmmSdpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FhmmSdpStatus::Panic
        }
    }
}

fn lib_err(e: FhmmError) -> (FhmmSdpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FhmmSdpStatus, String) {
    (FhmmSdpStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fhmm_sdp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses a model from NUL-terminated JSON.
///
/// # Safety
/// `json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_model_from_json(
    json: *const c_char,
    out: *mut *mut FhmmSdpModel,
) -> FhmmSdpStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|e| {
            (
                FhmmSdpStatus::InvalidInput,
                format!("model JSON is not UTF-8: {e}"),
            )
        })?;
        let parsed: model::FhmmModel = serde_json::from_str(text)
            .map_err(|e| (FhmmSdpStatus::InvalidInput, format!("model JSON: {e}")))?;
        let parsed = parsed.with_default_initial();
        parsed.validate().map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FhmmSdpModel(parsed)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`fhmm_sdp_model_from_json`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_model_free(model: *mut FhmmSdpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of appliances, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_model_num_appliances(model: *const FhmmSdpModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_appliances())
}

/// States of appliance `i`, 0 when out of range.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_model_num_states(model: *const FhmmSdpModel, i: usize) -> usize {
    model
        .as_ref()
        .and_then(|m| m.0.appliances.get(i))
        .map_or(0, |a| a.num_states())
}

/// Copies `len` aggregate readings into a new trace.
///
/// # Safety
/// `aggregate` must point to `len` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_trace_new(
    aggregate: *const f64,
    len: usize,
    out: *mut *mut FhmmSdpTrace,
) -> FhmmSdpStatus {
    guard(|| {
        if aggregate.is_null() {
            return Err(null("aggregate"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if len == 0 {
            return Err((FhmmSdpStatus::InvalidInput, "empty trace".into()));
        }
        let y = std::slice::from_raw_parts(aggregate, len).to_vec();
        if y.iter().any(|v| !v.is_finite()) {
            return Err((
                FhmmSdpStatus::InvalidInput,
                "trace contains non-finite values".into(),
            ));
        }
        *out = Box::into_raw(Box::new(FhmmSdpTrace(ObservationTrace::new(y))));
        Ok(())
    })
}

/// # Safety
/// `trace` must come from [`fhmm_sdp_trace_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_trace_free(trace: *mut FhmmSdpTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_trace_len(trace: *const FhmmSdpTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.len())
}

/// Defaults matching the command-line tool.
#[no_mangle]
pub extern "C" fn fhmm_sdp_infer_options_default() -> FhmmSdpInferOptions {
    let solver = SolverConfig::default();
    let rounding = RoundingConfig::default();
    FhmmSdpInferOptions {
        method: FhmmSdpMethod::AdmmRr,
        mu_step: solver.mu_step,
        max_sweeps: solver.max_sweeps,
        tolerance: solver.tolerance,
        samples_per_window: rounding.samples_per_window,
        trigger_period: rounding.trigger_period,
        seed: rounding.seed,
        use_edges: 0,
    }
}

/// Objective of a state sequence given as `len × M` row-major 0-based
/// indices. Forbidden transitions give infinity.
///
/// # Safety
/// Handles must be live, `states` must hold `len * M` values and `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_objective(
    model: *const FhmmSdpModel,
    trace: *const FhmmSdpTrace,
    states: *const usize,
    len: usize,
    use_edges: i32,
    out: *mut f64,
) -> FhmmSdpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let trace = trace.as_ref().ok_or_else(|| null("trace"))?;
        if states.is_null() {
            return Err(null("states"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let num_states = model.0.num_states();
        let m = num_states.len();
        let flat = std::slice::from_raw_parts(states, len * m);
        let rows = flat.chunks(m).map(<[usize]>::to_vec).collect();
        let seq = StateSequence::from_rows(rows, &num_states).map_err(lib_err)?;
        *out = model::objective(&model.0, &trace.0, &seq, use_edges != 0).map_err(lib_err)?;
        Ok(())
    })
}

/// Runs inference and returns a result handle.
///
/// # Safety
/// Handles must be live; `options` may be null for defaults; `out` must
/// be valid.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_infer(
    model: *const FhmmSdpModel,
    trace: *const FhmmSdpTrace,
    options: *const FhmmSdpInferOptions,
    out: *mut *mut FhmmSdpResult,
) -> FhmmSdpStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let trace = &trace.as_ref().ok_or_else(|| null("trace"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = options
            .as_ref()
            .copied()
            .unwrap_or_else(|| fhmm_sdp_infer_options_default());
        let solver = SolverConfig {
            mu_step: opts.mu_step,
            max_sweeps: opts.max_sweeps,
            tolerance: opts.tolerance,
            ..SolverConfig::default()
        };
        let rounding = RoundingConfig {
            samples_per_window: opts.samples_per_window,
            trigger_period: opts.trigger_period,
            seed: opts.seed,
        };
        let edges = EdgeMode::from(opts.use_edges != 0);
        let result = match opts.method {
            FhmmSdpMethod::Exact => {
                let (states, objective) =
                    exact_map_viterbi(model, trace, edges).map_err(lib_err)?;
                FhmmSdpResult {
                    states,
                    objective,
                    relaxed_objective: f64::NAN,
                    converged: true,
                }
            }
            FhmmSdpMethod::Admm => {
                solver.validate().map_err(lib_err)?;
                let problem = build(model, trace, edges).map_err(lib_err)?;
                let sol = solve(&problem, solver).map_err(lib_err)?;
                let states = naive_round(&sol, &model.num_states());
                let objective = model::objective(model, trace, &states, edges).map_err(lib_err)?;
                FhmmSdpResult {
                    states,
                    objective,
                    relaxed_objective: sol.objective,
                    converged: sol.converged,
                }
            }
            FhmmSdpMethod::AdmmRr => {
                let o = admm_rr(model, trace, solver, rounding, edges).map_err(lib_err)?;
                FhmmSdpResult {
                    states: o.states,
                    objective: o.objective,
                    relaxed_objective: o.relaxed.objective,
                    converged: o.relaxed.converged,
                }
            }
        };
        *out = Box::into_raw(Box::new(result));
        Ok(())
    })
}

/// # Safety
/// `result` must come from [`fhmm_sdp_infer`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_result_free(result: *mut FhmmSdpResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Number of time steps, 0 for a null handle.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_result_len(result: *const FhmmSdpResult) -> usize {
    result.as_ref().map_or(0, |r| r.states.len())
}

/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_result_num_appliances(result: *const FhmmSdpResult) -> usize {
    result.as_ref().map_or(0, |r| r.states.num_appliances())
}

/// MAP objective of the returned states; NaN for a null handle.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_result_objective(result: *const FhmmSdpResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.objective)
}

/// Relaxed objective; NaN for exact inference.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_result_relaxed_objective(result: *const FhmmSdpResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.relaxed_objective)
}

/// 1 if the solver met its tolerance (always 1 for exact inference).
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_result_converged(result: *const FhmmSdpResult) -> i32 {
    result.as_ref().map_or(0, |r| i32::from(r.converged))
}

/// Copies the `len × M` row-major 0-based states into `out`, which must
/// hold at least `capacity` values.
///
/// # Safety
/// `result` must be live and `out` must point to `capacity` writable values.
#[no_mangle]
pub unsafe extern "C" fn fhmm_sdp_result_states(
    result: *const FhmmSdpResult,
    out: *mut usize,
    capacity: usize,
) -> FhmmSdpStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = r.states.len() * r.states.num_appliances();
        if capacity < need {
            return Err((
                FhmmSdpStatus::InvalidInput,
                format!("buffer holds {capacity} values, {need} needed"),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (chunk, row) in dst
            .chunks_mut(r.states.num_appliances().max(1))
            .zip(r.states.rows())
        {
            chunk.copy_from_slice(row);
        }
        Ok(())
    })
}
