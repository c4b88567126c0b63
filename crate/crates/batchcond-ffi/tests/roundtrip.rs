//! Exercises the C entry points end to end from Rust.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use batchcond_ffi::{
    bc_config_free, bc_config_parse, bc_last_error, bc_records_free, bc_records_len,
    bc_records_to_csv, bc_replicate, bc_string_free, bc_summary_to_csv, bc_twobatch_decompose,
    BcConfig, BcRecords, BcStatus,
};

const CONFIG: &str = "\
model.mu = 0, 0
model.sigma2 = 1, 1
model.batch_sizes = 40, 40
model.outcome = exact
policy.kind = egreedy
target.kind = fixed_arm
target.arm = 1
inference.procedures = last_only, leftover
run.reps = 25
run.seed = 7
";

fn take_string(ptr: *mut c_char) -> String {
    assert!(!ptr.is_null());
    let s = unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_string();
    unsafe { bc_string_free(ptr) };
    s
}

#[test]
fn parse_replicate_serialize_roundtrip() {
    let text = CString::new(CONFIG).unwrap();
    let mut cfg: *mut BcConfig = ptr::null_mut();
    assert_eq!(
        unsafe { bc_config_parse(text.as_ptr(), &mut cfg) },
        BcStatus::Ok
    );
    assert!(!cfg.is_null());

    let mut recs: *mut BcRecords = ptr::null_mut();
    assert_eq!(unsafe { bc_replicate(cfg, &mut recs) }, BcStatus::Ok);
    // 25 replicates x 2 procedures.
    assert_eq!(unsafe { bc_records_len(recs) }, 50);

    let mut csv: *mut c_char = ptr::null_mut();
    assert_eq!(unsafe { bc_records_to_csv(recs, &mut csv) }, BcStatus::Ok);
    let csv = take_string(csv);
    assert!(csv.starts_with("rep_id,procedure,"));
    assert_eq!(csv.lines().count(), 51);

    let mut summary: *mut c_char = ptr::null_mut();
    assert_eq!(
        unsafe { bc_summary_to_csv(recs, &mut summary) },
        BcStatus::Ok
    );
    let summary = take_string(summary);
    assert!(summary.contains("last_only"));
    assert!(summary.contains("leftover"));
    assert_eq!(summary.lines().count(), 3);

    unsafe {
        bc_records_free(recs);
        bc_config_free(cfg);
    }
}

#[test]
fn bad_config_reports_message_and_leaves_handle_null() {
    let text = CString::new(format!("{CONFIG}unknown.key = 1\n")).unwrap();
    let mut cfg: *mut BcConfig = ptr::null_mut();
    assert_eq!(
        unsafe { bc_config_parse(text.as_ptr(), &mut cfg) },
        BcStatus::InvalidConfig
    );
    assert!(cfg.is_null());
    let msg = unsafe { CStr::from_ptr(bc_last_error()) }.to_str().unwrap();
    assert!(msg.contains("unknown"), "unexpected message: {msg}");
}

#[test]
fn null_arguments_are_rejected_not_fatal() {
    let mut cfg: *mut BcConfig = ptr::null_mut();
    assert_eq!(
        unsafe { bc_config_parse(ptr::null(), &mut cfg) },
        BcStatus::NullArgument
    );
    let mut recs: *mut BcRecords = ptr::null_mut();
    assert_eq!(
        unsafe { bc_replicate(ptr::null(), &mut recs) },
        BcStatus::NullArgument
    );
    assert_eq!(unsafe { bc_records_len(ptr::null()) }, 0);
    unsafe {
        bc_records_free(ptr::null_mut());
        bc_config_free(ptr::null_mut());
        bc_string_free(ptr::null_mut());
    }
}

#[test]
fn twobatch_decomposition_exports_coefficients() {
    let (mut a, mut b, mut c, mut sigma) = (0.0, 0.0, 0.0, 0.0);
    assert_eq!(
        unsafe { bc_twobatch_decompose(0.5, &mut a, &mut b, &mut c, &mut sigma) },
        BcStatus::Ok
    );
    // At an even split the pivot is recoverable exactly: no residual noise.
    assert!(sigma.abs() < 1e-12, "sigma = {sigma}");
    assert!((a - 1.0 / (2.0 * std::f64::consts::SQRT_2)).abs() < 1e-15);

    assert_eq!(
        unsafe { bc_twobatch_decompose(1.5, &mut a, &mut b, &mut c, &mut sigma) },
        BcStatus::RuntimeError
    );
    let msg = unsafe { CStr::from_ptr(bc_last_error()) }.to_str().unwrap();
    assert!(msg.contains("1.5"), "unexpected message: {msg}");
}
