//! C ABI for loading trained checkpoints, predicting, and the
//! MMD / source-weighting routines.
//!
//! Every fallible function returns a [`DamsdanStatus`]. On failure the
//! message is kept per thread and can be read with
//! [`damsdan_last_error_message`]. Panics never cross the boundary; they
//! surface as `DAMSDAN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use damsdan::mda::{mmd_squared_with, FusionWeights, MmdEstimator};
use damsdan::model::Damsdan;
use damsdan::numerics::Tensor;
use damsdan::{Error, ErrorKind};

/// Status codes. The error kinds share their values with the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DamsdanStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque handle to a trained model.
pub struct DamsdanModel {
    inner: Damsdan,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: DamsdanStatus, msg: impl Into<String>) -> DamsdanStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> DamsdanStatus {
    let status = match e.kind() {
        ErrorKind::Config => DamsdanStatus::Config,
        ErrorKind::Data => DamsdanStatus::Data,
        ErrorKind::Numeric => DamsdanStatus::Numeric,
        ErrorKind::Io => DamsdanStatus::Io,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> DamsdanStatus) -> DamsdanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(DamsdanStatus::Panic, "internal panic"),
    }
}

/// Copies `rows * cols` values from a caller buffer.
///
/// # Safety
/// `data` must point to at least `rows * cols` readable doubles.
unsafe fn tensor_from_raw(data: *const f64, rows: usize, cols: usize) -> Result<Tensor, DamsdanStatus> {
    if data.is_null() {
        return Err(fail(DamsdanStatus::NullPointer, "null matrix pointer"));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| fail(DamsdanStatus::Data, "matrix size overflows"))?;
    let values = std::slice::from_raw_parts(data, len).to_vec();
    Tensor::from_vec(rows, cols, values).map_err(from_error)
}

/// Length in bytes (including the terminating NUL) of the last error message
/// on this thread; 1 when there is none.
#[no_mangle]
pub extern "C" fn damsdan_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len() + 1)
}

/// Copies the last error message into `buf` as a NUL-terminated string.
/// Returns `DAMSDAN_STATUS_BUFFER_TOO_SMALL` (and writes nothing) when `len`
/// is shorter than [`damsdan_last_error_length`].
///
/// # Safety
/// `buf` must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn damsdan_last_error_message(buf: *mut c_char, len: usize) -> DamsdanStatus {
    if buf.is_null() {
        return DamsdanStatus::NullPointer;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if len < bytes.len() + 1 {
            return DamsdanStatus::BufferTooSmall;
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        *buf.add(bytes.len()) = 0;
        DamsdanStatus::Ok
    })
}

/// Loads a JSON checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a writable pointer.
/// The returned handle must be released with [`damsdan_model_free`].
#[no_mangle]
pub unsafe extern "C" fn damsdan_model_load(path: *const c_char, out: *mut *mut DamsdanModel) -> DamsdanStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(DamsdanStatus::NullPointer, "null argument to damsdan_model_load");
        }
        *out = ptr::null_mut();
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(DamsdanStatus::Config, "path is not valid UTF-8");
        };
        match Damsdan::load(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DamsdanModel { inner }));
                DamsdanStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`damsdan_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn damsdan_model_free(model: *mut DamsdanModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected feature count per sample, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn damsdan_model_input_dim(model: *const DamsdanModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.input_dim)
}

/// Number of emotion classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn damsdan_model_num_classes(model: *const DamsdanModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.num_classes)
}

/// Number of source branches, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn damsdan_model_num_sources(model: *const DamsdanModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_sources())
}

/// Class probabilities for `rows` samples stored row-major in `features`
/// (`rows * cols` values). Writes `rows * num_classes` values to `probs`,
/// whose capacity is `probs_len`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn damsdan_model_predict(
    model: *const DamsdanModel,
    features: *const f64,
    rows: usize,
    cols: usize,
    probs: *mut f64,
    probs_len: usize,
) -> DamsdanStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail(DamsdanStatus::NullPointer, "null model handle");
        };
        if probs.is_null() {
            return fail(DamsdanStatus::NullPointer, "null output buffer");
        }
        let x = match tensor_from_raw(features, rows, cols) {
            Ok(x) => x,
            Err(s) => return s,
        };
        let needed = rows * model.inner.config.num_classes;
        if probs_len < needed {
            return fail(
                DamsdanStatus::BufferTooSmall,
                format!("output needs {needed} values, buffer holds {probs_len}"),
            );
        }
        match model.inner.predict(&x) {
            Ok(p) => {
                ptr::copy_nonoverlapping(p.data().as_ptr(), probs, needed);
                DamsdanStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Squared MMD between two sample sets with a Gaussian kernel of width
/// `sigma`. `unbiased` selects the U-statistic over the V-statistic.
///
/// # Safety
/// `a` holds `a_rows * cols` and `b` holds `b_rows * cols` doubles; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn damsdan_mmd_squared(
    a: *const f64,
    a_rows: usize,
    b: *const f64,
    b_rows: usize,
    cols: usize,
    sigma: f64,
    unbiased: bool,
    out: *mut f64,
) -> DamsdanStatus {
    guard(|| {
        if out.is_null() {
            return fail(DamsdanStatus::NullPointer, "null output pointer");
        }
        let (a, b) = match (tensor_from_raw(a, a_rows, cols), tensor_from_raw(b, b_rows, cols)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let estimator = if unbiased {
            MmdEstimator::Unbiased
        } else {
            MmdEstimator::Biased
        };
        match mmd_squared_with(&a, &b, sigma, estimator) {
            Ok(v) => {
                *out = v;
                DamsdanStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Source fusion weights from `count` raw per-source MMD values. The values
/// are scaled to sum to one, decayed by `exp(-w^2 / (2 gamma^2))` and
/// renormalized, so closer sources weigh more.
///
/// # Safety
/// `raw_mmd` holds `count` doubles and `out` is writable for `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn damsdan_fusion_weights(
    raw_mmd: *const f64,
    count: usize,
    gamma: f64,
    out: *mut f64,
) -> DamsdanStatus {
    guard(|| {
        if raw_mmd.is_null() || out.is_null() {
            return fail(DamsdanStatus::NullPointer, "null argument to damsdan_fusion_weights");
        }
        let raw = std::slice::from_raw_parts(raw_mmd, count).to_vec();
        match FusionWeights::from_raw_mmd(raw, gamma, 0) {
            Ok(w) => {
                ptr::copy_nonoverlapping(w.final_weights.as_ptr(), out, count);
                DamsdanStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn damsdan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
