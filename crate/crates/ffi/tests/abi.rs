//! Exercises the C ABI from Rust: handle lifecycles, JSON round-trips,
//! buffer and status-code contracts, and agreement with the underlying
//! library.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use nalgebra::DMatrix;
use unident::controller::{input_rank, lqr_infinite, LqrCost};
use unident::numerics::Tolerances;
use unident::system_model::LtiSystem;
use unident_ffi::*;

fn demo_system_json() -> CString {
    let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, 0.3, 0.2, 0.1, 0.0, 0.4]);
    let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
    let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    let sys = LtiSystem::fully_masked(a, b, c).unwrap();
    CString::new(sys.to_json_pretty().unwrap()).unwrap()
}

unsafe fn parse_demo() -> *mut UnidentSystem {
    let mut sys = ptr::null_mut();
    let status = unident_system_parse(demo_system_json().as_ptr(), &mut sys);
    assert_eq!(status, UnidentStatus::Ok);
    assert!(!sys.is_null());
    sys
}

unsafe fn take_string(raw: *mut c_char) -> String {
    assert!(!raw.is_null());
    let text = CStr::from_ptr(raw).to_str().unwrap().to_owned();
    unident_string_free(raw);
    text
}

#[test]
fn version_is_a_nonempty_static_string() {
    let v = unsafe { CStr::from_ptr(unident_version()) }.to_str().unwrap();
    assert!(!v.is_empty());
    assert!(v.chars().next().unwrap().is_ascii_digit());
}

#[test]
fn system_parse_dims_serialize_roundtrip() {
    unsafe {
        let sys = parse_demo();
        let (mut p, mut l, mut m, mut n) = (0usize, 0usize, 0usize, 0usize);
        assert_eq!(
            unident_system_dims(sys, &mut p, &mut l, &mut m, &mut n),
            UnidentStatus::Ok
        );
        assert_eq!((p, l, m, n), (3, 2, 2, 21));

        let mut raw = ptr::null_mut();
        assert_eq!(unident_system_to_json(sys, &mut raw), UnidentStatus::Ok);
        let json = take_string(raw);
        let reparsed = LtiSystem::from_json_str(&json).unwrap();
        assert_eq!(reparsed.a, DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, 0.3, 0.2, 0.1, 0.0, 0.4]));
        unident_system_free(sys);
    }
}

#[test]
fn bad_json_sets_the_last_error_and_a_json_status() {
    unsafe {
        let mut sys = ptr::null_mut();
        let garbage = CString::new("{ not json").unwrap();
        let status = unident_system_parse(garbage.as_ptr(), &mut sys);
        assert_eq!(status, UnidentStatus::Json);
        assert!(sys.is_null());
        let msg = CStr::from_ptr(unident_last_error()).to_str().unwrap();
        assert!(!msg.is_empty());
    }
}

#[test]
fn null_arguments_are_rejected_not_dereferenced() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(
            unident_system_parse(ptr::null(), &mut out),
            UnidentStatus::NullArgument
        );
        assert_eq!(
            unident_system_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()),
            UnidentStatus::NullArgument
        );
        // Free functions tolerate NULL like free().
        unident_system_free(ptr::null_mut());
        unident_controller_free(ptr::null_mut());
        unident_string_free(ptr::null_mut());
    }
}

#[test]
fn analyze_reports_match_the_library_verdict() {
    unsafe {
        let sys = parse_demo();
        let t = 30usize;
        let u: Vec<f64> = (0..t * 2).map(|k| ((k as f64) * 0.7).sin()).collect();
        let mut raw = ptr::null_mut();
        let status = unident_analyze(sys, u.as_ptr(), t, 0.0, 0.0, &mut raw);
        assert_eq!(status, UnidentStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&take_string(raw)).unwrap();
        assert_eq!(report["n"], 21);
        assert!(report["rank_F"].is_number());
        assert!(report["dynamic_identifiable"].is_boolean());
        unident_system_free(sys);
    }
}

#[test]
fn analyze_rejects_zero_steps_with_a_shape_status() {
    unsafe {
        let sys = parse_demo();
        let u = [0.0f64; 2];
        let mut raw = ptr::null_mut();
        assert_eq!(
            unident_analyze(sys, u.as_ptr(), 0, 0.0, 0.0, &mut raw),
            UnidentStatus::Shape
        );
        unident_system_free(sys);
    }
}

#[test]
fn lqr_gain_agrees_with_the_library_and_checks_buffer_capacity() {
    unsafe {
        let sys = parse_demo();
        let mut gain = [0.0f64; 6];
        assert_eq!(
            unident_lqr_gain(sys, 1.0, 1.0, gain.as_mut_ptr(), 4),
            UnidentStatus::Buffer
        );
        assert_eq!(
            unident_lqr_gain(sys, 1.0, 1.0, gain.as_mut_ptr(), 6),
            UnidentStatus::Ok
        );
        let reference = {
            let json = demo_system_json();
            let sys = LtiSystem::from_json_str(json.to_str().unwrap()).unwrap();
            let cost = LqrCost::scalars(1.0, 1.0, 2, 2).unwrap();
            lqr_infinite(&sys, &cost, &Tolerances::default()).unwrap().gain
        };
        for i in 0..2 {
            for j in 0..3 {
                assert!((gain[i * 3 + j] - reference[(i, j)]).abs() < 1e-12);
            }
        }
        unident_system_free(sys);
    }
}

#[test]
fn design_simulate_and_controller_roundtrip_through_the_abi() {
    unsafe {
        let sys = parse_demo();
        let mut ctl = ptr::null_mut();
        assert_eq!(
            unident_design(sys, 1.0, 1.0, 1, 7, &mut ctl),
            UnidentStatus::Ok
        );
        let (mut l, mut p, mut r) = (0usize, 0usize, 0usize);
        assert_eq!(unident_controller_dims(ctl, &mut l, &mut p, &mut r), UnidentStatus::Ok);
        assert_eq!((l, p, r), (2, 3, 1));

        let mut fb = [0.0f64; 6];
        assert_eq!(unident_controller_feedback(ctl, fb.as_mut_ptr(), 6), UnidentStatus::Ok);
        assert!(fb.iter().any(|v| v.abs() > 0.0));

        // JSON round-trip preserves the feedback exactly.
        let mut raw = ptr::null_mut();
        assert_eq!(unident_controller_to_json(ctl, &mut raw), UnidentStatus::Ok);
        let json = CString::new(take_string(raw)).unwrap();
        let mut ctl2 = ptr::null_mut();
        assert_eq!(unident_controller_parse(json.as_ptr(), &mut ctl2), UnidentStatus::Ok);
        let mut fb2 = [0.0f64; 6];
        assert_eq!(unident_controller_feedback(ctl2, fb2.as_mut_ptr(), 6), UnidentStatus::Ok);
        assert_eq!(fb, fb2);

        // Closed-loop outputs are consistent and the input stays rank 1.
        let steps = 20usize;
        let x0 = [0.4f64, -0.2, 0.1];
        let mut u_out = vec![0.0f64; steps * 2];
        let mut y_out = vec![0.0f64; steps * 2];
        assert_eq!(
            unident_simulate_closed(
                sys,
                ctl,
                x0.as_ptr(),
                steps,
                u_out.as_mut_ptr(),
                u_out.len(),
                y_out.as_mut_ptr(),
                y_out.len(),
            ),
            UnidentStatus::Ok
        );
        let u = DMatrix::from_row_slice(steps, 2, &u_out);
        assert_eq!(input_rank(&u, &Tolerances::default()).unwrap(), 1);

        unident_controller_free(ctl2);
        unident_controller_free(ctl);
        unident_system_free(sys);
    }
}

#[test]
fn rank_beyond_the_input_dimension_is_a_typed_error() {
    unsafe {
        let sys = parse_demo();
        let mut ctl = ptr::null_mut();
        let status = unident_design(sys, 1.0, 1.0, 9, 7, &mut ctl);
        assert_eq!(status, UnidentStatus::Shape);
        assert!(ctl.is_null());
        let msg = CStr::from_ptr(unident_last_error()).to_str().unwrap();
        assert!(msg.contains('9'), "message should mention the bad rank: {msg}");
        unident_system_free(sys);
    }
}
