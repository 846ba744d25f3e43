//! C ABI for MOS prediction and evaluation metrics.
//!
//! Models are opaque [`SalfModel`] handles created by [`salf_model_load`] or
//! [`salf_model_from_bytes`] and released with [`salf_model_free`]. Every
//! fallible call returns a [`SalfStatus`]; on failure a description is
//! available from [`salf_last_error`] on the same thread. Loaded models are
//! read-only and may be shared between threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use salfmos::features::CepstralConfig;
use salfmos::inference::{predict_feature_bytes, predict_vector, predict_wav, InferenceError};
use salfmos::metrics::{self, KendallVariant, MetricError, ScorePairs};
use salfmos::model::{decode_checkpoint, load_checkpoint, CheckpointError, SalfModel as Model};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SalfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument is out of range or not valid UTF-8.
    InvalidArgument = 2,
    /// A file could not be read.
    Io = 3,
    /// Input bytes are not a valid checkpoint, feature file or WAV.
    Format = 4,
    /// Input does not match the model's feature kind or length.
    Mismatch = 5,
    /// A correlation is undefined for the given data (constant or fully tied input).
    Undefined = 6,
    /// Unexpected failure, including a caught panic.
    Internal = 7,
}

/// Kendall tau variant for [`salf_metric_ktau`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SalfKendall {
    /// `(C - D) / (C + D)`, tied pairs excluded.
    Gamma = 0,
    /// Tie-corrected tau-b.
    TauB = 1,
}

/// Opaque model handle.
pub struct SalfModel {
    model: Model,
    cepstral: CepstralConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

type FfiResult<T> = Result<T, (SalfStatus, String)>;

/// Runs `f`, recording any error or panic for `salf_last_error`.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> SalfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SalfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SalfStatus::Internal
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    // SAFETY: the caller guarantees that non-null pointers are valid.
    unsafe { p.as_ref() }.ok_or_else(|| (SalfStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    // SAFETY: as above, for a writable location.
    unsafe { p.as_mut() }.ok_or_else(|| (SalfStatus::NullPointer, format!("{what} is null")))
}

fn bytes<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    // SAFETY: the caller guarantees `len` readable elements at `p`.
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

fn checkpoint_error(e: CheckpointError) -> (SalfStatus, String) {
    let status = match e {
        CheckpointError::Io(ref io) if io.kind() != std::io::ErrorKind::UnexpectedEof => SalfStatus::Io,
        _ => SalfStatus::Format,
    };
    (status, e.to_string())
}

fn inference_error(e: InferenceError) -> (SalfStatus, String) {
    let status = match e {
        InferenceError::Malformed(_) => SalfStatus::Format,
        InferenceError::KindMismatch(_) => SalfStatus::Mismatch,
        InferenceError::Internal(_) => SalfStatus::Internal,
    };
    (status, e.to_string())
}

fn metric_error(e: MetricError) -> (SalfStatus, String) {
    let status = match e {
        MetricError::ConstantInput | MetricError::AllTied => SalfStatus::Undefined,
        _ => SalfStatus::InvalidArgument,
    };
    (status, e.to_string())
}

fn boxed(model: Model) -> *mut SalfModel {
    Box::into_raw(Box::new(SalfModel {
        model,
        cepstral: CepstralConfig::default(),
    }))
}

/// Loads a checkpoint file. On success `*out` receives a handle to free
/// with `salf_model_free`; on failure it is set to null.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn salf_model_load(path: *const c_char, out: *mut *mut SalfModel) -> SalfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        non_null(path, "path")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SalfStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        *out = boxed(load_checkpoint(path).map_err(checkpoint_error)?);
        Ok(())
    })
}

/// Decodes a checkpoint held in memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn salf_model_from_bytes(data: *const u8, len: usize, out: *mut *mut SalfModel) -> SalfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let data = bytes(data, len, "data")?;
        *out = boxed(decode_checkpoint(data).map_err(checkpoint_error)?);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn salf_model_free(model: *mut SalfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the raw feature vector the model expects, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn salf_model_feature_dim(model: *const SalfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.feature_dim())
}

/// Padded network input length, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn salf_model_input_dim(model: *const SalfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().input_dim)
}

/// Feature kind tag as stored in feature files (0 mfcc, 1 lfcc, 2 wav2vec,
/// 3 xvector, 4 raw), or -1 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn salf_model_feature_kind(model: *const SalfModel) -> i32 {
    model.as_ref().map_or(-1, |m| i32::from(m.model.feature_kind().tag()))
}

/// Number of trainable parameters, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn salf_model_num_params(model: *const SalfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_params())
}

/// Predicts MOS from a pooled feature vector of `salf_model_feature_dim` values.
///
/// # Safety
/// `features` must point to `len` doubles; `out_mos` must be writable.
#[no_mangle]
pub unsafe extern "C" fn salf_predict_features(
    model: *const SalfModel,
    features: *const f64,
    len: usize,
    out_mos: *mut f64,
) -> SalfStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let out = out_ptr(out_mos, "out_mos")?;
        let x = bytes(features, len, "features")?;
        *out = predict_vector(&m.model, x).map_err(inference_error)?;
        Ok(())
    })
}

/// Predicts MOS from the bytes of a feature file.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out_mos` must be writable.
#[no_mangle]
pub unsafe extern "C" fn salf_predict_feature_file(
    model: *const SalfModel,
    data: *const u8,
    len: usize,
    out_mos: *mut f64,
) -> SalfStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let out = out_ptr(out_mos, "out_mos")?;
        let data = bytes(data, len, "data")?;
        *out = predict_feature_bytes(&m.model, data).map_err(inference_error)?;
        Ok(())
    })
}

/// Predicts MOS from WAV bytes. Requires a model trained on MFCC or LFCC.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out_mos` must be writable.
#[no_mangle]
pub unsafe extern "C" fn salf_predict_wav(
    model: *const SalfModel,
    data: *const u8,
    len: usize,
    out_mos: *mut f64,
) -> SalfStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let out = out_ptr(out_mos, "out_mos")?;
        let data = bytes(data, len, "data")?;
        *out = predict_wav(&m.model, data, &m.cepstral).map_err(inference_error)?;
        Ok(())
    })
}

unsafe fn metric(
    actual: *const f64,
    predicted: *const f64,
    n: usize,
    out: *mut f64,
    f: impl FnOnce(ScorePairs<'_>) -> Result<f64, MetricError>,
) -> SalfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let x = bytes(actual, n, "actual")?;
        let y = bytes(predicted, n, "predicted")?;
        let pairs = ScorePairs::new(x, y).map_err(metric_error)?;
        *out = f(pairs).map_err(metric_error)?;
        Ok(())
    })
}

/// Mean squared error of `n` score pairs.
///
/// # Safety
/// `actual` and `predicted` must each point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn salf_metric_mse(actual: *const f64, predicted: *const f64, n: usize, out: *mut f64) -> SalfStatus {
    metric(actual, predicted, n, out, metrics::mse)
}

/// Pearson linear correlation.
///
/// # Safety
/// As for `salf_metric_mse`.
#[no_mangle]
pub unsafe extern "C" fn salf_metric_lcc(actual: *const f64, predicted: *const f64, n: usize, out: *mut f64) -> SalfStatus {
    metric(actual, predicted, n, out, metrics::lcc)
}

/// Spearman rank correlation with average ranks for ties.
///
/// # Safety
/// As for `salf_metric_mse`.
#[no_mangle]
pub unsafe extern "C" fn salf_metric_srcc(actual: *const f64, predicted: *const f64, n: usize, out: *mut f64) -> SalfStatus {
    metric(actual, predicted, n, out, metrics::srcc)
}

/// Kendall rank correlation.
///
/// # Safety
/// As for `salf_metric_mse`.
#[no_mangle]
pub unsafe extern "C" fn salf_metric_ktau(
    actual: *const f64,
    predicted: *const f64,
    n: usize,
    variant: SalfKendall,
    out: *mut f64,
) -> SalfStatus {
    let variant = match variant {
        SalfKendall::Gamma => KendallVariant::Gamma,
        SalfKendall::TauB => KendallVariant::TauB,
    };
    metric(actual, predicted, n, out, |p| metrics::ktau(p, variant))
}

/// Message for the last failed call on this thread, or an empty string.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn salf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn salf_status_str(status: SalfStatus) -> *const c_char {
    let s: &'static CStr = match status {
        SalfStatus::Ok => c"ok",
        SalfStatus::NullPointer => c"null pointer",
        SalfStatus::InvalidArgument => c"invalid argument",
        SalfStatus::Io => c"i/o error",
        SalfStatus::Format => c"malformed input",
        SalfStatus::Mismatch => c"feature mismatch",
        SalfStatus::Undefined => c"undefined metric",
        SalfStatus::Internal => c"internal error",
    };
    s.as_ptr()
}

/// Library version, e.g. "0.1.0".
#[no_mangle]
pub extern "C" fn salf_version() -> *const c_char {
    const V: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version contains a nul byte"),
    };
    V.as_ptr()
}
