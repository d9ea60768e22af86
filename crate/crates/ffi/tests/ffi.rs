use std::ffi::{CStr, CString};
use std::ptr;

use fhmm_sdp::datagen::{random_model, simulate_generated, GenConfig};
use fhmm_sdp::exact::exact_map_viterbi;
use fhmm_sdp_ffi::*;

struct Fixture {
    model: *mut FhmmSdpModel,
    trace: *mut FhmmSdpTrace,
    expected: f64,
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            fhmm_sdp_model_free(self.model);
            fhmm_sdp_trace_free(self.trace);
        }
    }
}

fn fixture(len: usize, seed: u64) -> Fixture {
    let model = random_model(&GenConfig::new(2, 2, len, seed)).unwrap();
    let (_, trace) = simulate_generated(&model, len, seed + 100).unwrap();
    let (_, expected) = exact_map_viterbi(&model, &trace, false).unwrap();
    let json = CString::new(serde_json::to_string(&model).unwrap()).unwrap();
    let mut m = ptr::null_mut();
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(
            fhmm_sdp_model_from_json(json.as_ptr(), &mut m),
            FhmmSdpStatus::Ok
        );
        assert_eq!(
            fhmm_sdp_trace_new(trace.aggregate.as_ptr(), trace.len(), &mut t),
            FhmmSdpStatus::Ok
        );
    }
    Fixture {
        model: m,
        trace: t,
        expected,
    }
}

fn last_error() -> String {
    let p = fhmm_sdp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_accessors() {
    let f = fixture(10, 1);
    unsafe {
        assert_eq!(fhmm_sdp_model_num_appliances(f.model), 2);
        assert_eq!(fhmm_sdp_model_num_states(f.model, 1), 2);
        assert_eq!(fhmm_sdp_model_num_states(f.model, 2), 0);
        assert_eq!(fhmm_sdp_trace_len(f.trace), 10);
        assert_eq!(fhmm_sdp_model_num_appliances(ptr::null()), 0);
    }
}

#[test]
fn exact_inference_matches_library() {
    let f = fixture(20, 2);
    let mut opts = fhmm_sdp_infer_options_default();
    opts.method = FhmmSdpMethod::Exact;
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(
            fhmm_sdp_infer(f.model, f.trace, &opts, &mut r),
            FhmmSdpStatus::Ok
        );
        assert_eq!(fhmm_sdp_result_objective(r), f.expected);
        assert!(fhmm_sdp_result_relaxed_objective(r).is_nan());
        assert_eq!(fhmm_sdp_result_converged(r), 1);
        let len = fhmm_sdp_result_len(r);
        let m = fhmm_sdp_result_num_appliances(r);
        assert_eq!((len, m), (20, 2));
        let mut states = vec![usize::MAX; len * m];
        assert_eq!(
            fhmm_sdp_result_states(r, states.as_mut_ptr(), states.len()),
            FhmmSdpStatus::Ok
        );
        assert!(states.iter().all(|&s| s < 2));
        let mut obj = 0.0;
        assert_eq!(
            fhmm_sdp_objective(f.model, f.trace, states.as_ptr(), len, 0, &mut obj),
            FhmmSdpStatus::Ok
        );
        assert!((obj - f.expected).abs() <= 1e-9 * (1.0 + obj.abs()));
        fhmm_sdp_result_free(r);
    }
}

#[test]
fn admm_rr_with_defaults_is_feasible() {
    let f = fixture(8, 3);
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(
            fhmm_sdp_infer(f.model, f.trace, ptr::null(), &mut r),
            FhmmSdpStatus::Ok
        );
        let obj = fhmm_sdp_result_objective(r);
        assert!(obj.is_finite());
        assert!(obj >= f.expected - 1e-9 * (1.0 + obj.abs()));
        fhmm_sdp_result_free(r);
    }
}

#[test]
fn small_buffer_is_rejected() {
    let f = fixture(6, 4);
    let mut opts = fhmm_sdp_infer_options_default();
    opts.method = FhmmSdpMethod::Exact;
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(
            fhmm_sdp_infer(f.model, f.trace, &opts, &mut r),
            FhmmSdpStatus::Ok
        );
        let mut buf = [0usize; 3];
        assert_eq!(
            fhmm_sdp_result_states(r, buf.as_mut_ptr(), buf.len()),
            FhmmSdpStatus::InvalidInput
        );
        assert!(last_error().contains("needed"));
        fhmm_sdp_result_free(r);
    }
}

#[test]
fn bad_inputs_report_status_and_message() {
    let mut m = ptr::null_mut();
    let bad = CString::new("{\"appliances\": 3}").unwrap();
    unsafe {
        assert_eq!(
            fhmm_sdp_model_from_json(bad.as_ptr(), &mut m),
            FhmmSdpStatus::InvalidInput
        );
        assert!(m.is_null());
        assert!(last_error().contains("model JSON"));

        assert_eq!(
            fhmm_sdp_model_from_json(ptr::null(), &mut m),
            FhmmSdpStatus::NullPointer
        );

        let mut t = ptr::null_mut();
        let y = [1.0, f64::NAN];
        assert_eq!(
            fhmm_sdp_trace_new(y.as_ptr(), 2, &mut t),
            FhmmSdpStatus::InvalidInput
        );
        assert_eq!(
            fhmm_sdp_trace_new(y.as_ptr(), 0, &mut t),
            FhmmSdpStatus::InvalidInput
        );

        let mut r = ptr::null_mut();
        assert_eq!(
            fhmm_sdp_infer(ptr::null(), ptr::null(), ptr::null(), &mut r),
            FhmmSdpStatus::NullPointer
        );
    }
}

#[test]
fn invalid_solver_settings_are_input_errors() {
    let f = fixture(5, 5);
    let mut opts = fhmm_sdp_infer_options_default();
    opts.mu_step = -1.0;
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(
            fhmm_sdp_infer(f.model, f.trace, &opts, &mut r),
            FhmmSdpStatus::InvalidInput
        );
        assert!(r.is_null());
    }
}

#[test]
fn free_accepts_null() {
    unsafe {
        fhmm_sdp_model_free(ptr::null_mut());
        fhmm_sdp_trace_free(ptr::null_mut());
        fhmm_sdp_result_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_interface() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fhmm_sdp.h"))
            .unwrap();
    for name in [
        "fhmm_sdp_model_from_json",
        "fhmm_sdp_infer",
        "fhmm_sdp_result_states",
        "fhmm_sdp_last_error",
        "FHMM_SDP_STATUS_CAPACITY",
        "typedef struct FhmmSdpModel FhmmSdpModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
