//! C ABI for the batchcond engine.
//!
//! The interface follows the usual opaque-handle pattern: configurations and
//! record sets live behind pointers created and destroyed by this library,
//! every fallible call returns a [`BcStatus`], and the most recent failure
//! message is retrievable per thread via [`bc_last_error`]. Strings returned
//! through out-parameters are NUL-terminated, owned by the caller, and must
//! be released with [`bc_string_free`].
//!
//! All functions tolerate NULL where a handle or out-pointer is expected and
//! report [`BcStatus::NullArgument`] instead of crashing; passing a pointer
//! that was not produced by this library (or was already freed) is undefined
//! behavior, as is sharing a mutable handle across threads without
//! synchronization.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

use batchcond::harness::{
    self, parse_config, records_to_csv, replicate, summary_to_csv, RunConfig,
};
use batchcond::twobatch::pivot_decompose;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration failed to parse or validate.
    InvalidConfig = 3,
    /// The computation itself failed; see `bc_last_error`.
    RuntimeError = 4,
}

/// Opaque parsed-and-validated run configuration.
pub struct BcConfig(RunConfig);

/// Opaque set of per-replicate result rows.
pub struct BcRecords {
    records: Vec<harness::ReplicateRecord>,
    arms: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    // NUL bytes cannot occur in the crate's error strings; replace defensively.
    let owned = CString::new(message).unwrap_or_else(|_| {
        CString::new(message.replace('\0', "?")).expect("NUL-free after replacement")
    });
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

/// Message of the most recent failure on the calling thread.
///
/// The pointer stays valid until the next failing call on the same thread;
/// the string is empty if no call has failed yet. Do not free it.
#[no_mangle]
pub extern "C" fn bc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// # Safety
/// `text` must be a NUL-terminated string; `out` must be a valid writable
/// pointer. On success `*out` owns a new configuration that must be released
/// with [`bc_config_free`].
#[no_mangle]
pub unsafe extern "C" fn bc_config_parse(
    text: *const c_char,
    out: *mut *mut BcConfig,
) -> BcStatus {
    if text.is_null() || out.is_null() {
        set_last_error("bc_config_parse: NULL argument");
        return BcStatus::NullArgument;
    }
    *out = ptr::null_mut();
    let text = match CStr::from_ptr(text).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_last_error("bc_config_parse: config text is not valid UTF-8");
            return BcStatus::InvalidUtf8;
        }
    };
    match parse_config(text) {
        Ok(cfg) => {
            *out = Box::into_raw(Box::new(BcConfig(cfg)));
            BcStatus::Ok
        }
        Err(e) => {
            set_last_error(&e.to_string());
            BcStatus::InvalidConfig
        }
    }
}

/// # Safety
/// `cfg` must be NULL or a pointer returned by [`bc_config_parse`] that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn bc_config_free(cfg: *mut BcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Run every replicate of the configured experiment.
///
/// # Safety
/// `cfg` must be a live configuration handle; `out` must be a valid writable
/// pointer. On success `*out` owns a new record set that must be released
/// with [`bc_records_free`].
#[no_mangle]
pub unsafe extern "C" fn bc_replicate(
    cfg: *const BcConfig,
    out: *mut *mut BcRecords,
) -> BcStatus {
    if cfg.is_null() || out.is_null() {
        set_last_error("bc_replicate: NULL argument");
        return BcStatus::NullArgument;
    }
    *out = ptr::null_mut();
    let cfg = &(*cfg).0;
    match replicate(cfg) {
        Ok(records) => {
            *out = Box::into_raw(Box::new(BcRecords {
                records,
                arms: cfg.params.k(),
            }));
            BcStatus::Ok
        }
        Err(e) => {
            set_last_error(&e.to_string());
            BcStatus::RuntimeError
        }
    }
}

/// Number of rows in a record set (one row per replicate and procedure).
///
/// # Safety
/// `records` must be NULL (returning 0) or a live record-set handle.
#[no_mangle]
pub unsafe extern "C" fn bc_records_len(records: *const BcRecords) -> usize {
    if records.is_null() {
        return 0;
    }
    (*records).records.len()
}

fn emit_string(out: *mut *mut c_char, text: String) -> BcStatus {
    match CString::new(text) {
        Ok(s) => {
            unsafe { *out = s.into_raw() };
            BcStatus::Ok
        }
        Err(_) => {
            set_last_error("CSV output unexpectedly contained a NUL byte");
            BcStatus::RuntimeError
        }
    }
}

/// Serialize the per-replicate rows as CSV.
///
/// # Safety
/// `records` must be a live record-set handle; `out` must be a valid writable
/// pointer. On success `*out` owns a string to release with
/// [`bc_string_free`].
#[no_mangle]
pub unsafe extern "C" fn bc_records_to_csv(
    records: *const BcRecords,
    out: *mut *mut c_char,
) -> BcStatus {
    if records.is_null() || out.is_null() {
        set_last_error("bc_records_to_csv: NULL argument");
        return BcStatus::NullArgument;
    }
    *out = ptr::null_mut();
    let recs = &*records;
    emit_string(out, records_to_csv(&recs.records, recs.arms))
}

/// Summarize a record set (one CSV row per procedure).
///
/// # Safety
/// `records` must be a live record-set handle; `out` must be a valid writable
/// pointer. On success `*out` owns a string to release with
/// [`bc_string_free`].
#[no_mangle]
pub unsafe extern "C" fn bc_summary_to_csv(
    records: *const BcRecords,
    out: *mut *mut c_char,
) -> BcStatus {
    if records.is_null() || out.is_null() {
        set_last_error("bc_summary_to_csv: NULL argument");
        return BcStatus::NullArgument;
    }
    *out = ptr::null_mut();
    let recs = &*records;
    let rows = harness::summarize(&recs.records);
    emit_string(out, summary_to_csv(&rows))
}

/// # Safety
/// `records` must be NULL or a pointer returned by [`bc_replicate`] that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn bc_records_free(records: *mut BcRecords) {
    if !records.is_null() {
        drop(Box::from_raw(records));
    }
}

/// # Safety
/// `s` must be NULL or a string returned by this library that has not been
/// freed yet.
#[no_mangle]
pub unsafe extern "C" fn bc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Coefficients of the two-batch pivot decomposition at second-batch share
/// `pi`: loadings on the first-batch difference, on the two information
/// statistics, and the standard deviation of the pure-noise residual.
///
/// # Safety
/// All four out-pointers must be valid writable pointers.
#[no_mangle]
pub unsafe extern "C" fn bc_twobatch_decompose(
    pi: f64,
    out_a: *mut f64,
    out_b: *mut f64,
    out_c: *mut f64,
    out_sigma: *mut f64,
) -> BcStatus {
    if out_a.is_null() || out_b.is_null() || out_c.is_null() || out_sigma.is_null() {
        set_last_error("bc_twobatch_decompose: NULL argument");
        return BcStatus::NullArgument;
    }
    match pivot_decompose(pi) {
        Ok(coef) => {
            *out_a = coef.a;
            *out_b = coef.b;
            *out_c = coef.c;
            *out_sigma = coef.sigma;
            BcStatus::Ok
        }
        Err(e) => {
            set_last_error(&e.to_string());
            BcStatus::RuntimeError
        }
    }
}
