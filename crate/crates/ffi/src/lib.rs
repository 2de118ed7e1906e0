//! C ABI over the convzoo engine.
//!
//! Models are opaque [`CzModel`] handles created by [`cz_model_new`] and
//! released with [`cz_model_free`]. Every fallible call returns a
//! [`CzStatus`]; on failure [`cz_last_error`] describes what went wrong on
//! the calling thread. Strings returned by the library are owned by the
//! caller and must be released with [`cz_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use convzoo::data::checkpoint::{load_checkpoint, save_checkpoint};
use convzoo::metrics::{iou, BBox};
use convzoo::zoo::{self, audit, freeze_backbone};
use convzoo::{ArchGraph, Error, ModelKind, ModelSpec, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CzStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Data = 5,
    State = 6,
    Format = 7,
    Parse = 8,
    Io = 9,
    BufferTooSmall = 10,
    Internal = 11,
    Panic = 12,
}

/// Opaque model handle.
pub struct CzModel {
    graph: ArchGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(CzStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Length { .. } | Error::Shape { .. } => CzStatus::Shape,
            Error::Config(_) => CzStatus::Config,
            Error::Data(_) => CzStatus::Data,
            Error::State(_) => CzStatus::State,
            Error::Format { .. } => CzStatus::Format,
            Error::Parse { .. } => CzStatus::Parse,
            Error::Io(_) => CzStatus::Io,
            Error::Internal(_) => CzStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: CzStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CzStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CzStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            CzStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(CzStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(CzStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn model_ref<'a>(m: *const CzModel) -> Result<&'a CzModel, Failure> {
    m.as_ref().ok_or_else(|| fail(CzStatus::NullArgument, "model handle is null"))
}

unsafe fn model_mut<'a>(m: *mut CzModel) -> Result<&'a mut CzModel, Failure> {
    m.as_mut().ok_or_else(|| fail(CzStatus::NullArgument, "model handle is null"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(CzStatus::NullArgument, format!("{what} is null")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| fail(CzStatus::Internal, "string contains an interior nul"))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn cz_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn cz_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model.
///
/// `kind` is one of the model names (`evolved_baseline`, `mini_yolo`, ...).
/// `width` scales channel counts (1.0 for the full model); `resolution`
/// overrides the square input size when non-zero. For `transfer_head` the
/// feature dimension is 1280.
///
/// # Safety
/// `kind` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cz_model_new(
    kind: *const c_char,
    classes: usize,
    width: f64,
    resolution: usize,
    seed: u64,
    out: *mut *mut CzModel,
) -> CzStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let kind: ModelKind = str_arg(kind, "kind")?.parse()?;
        let mut spec = ModelSpec::new(kind, classes).with_width(width);
        if resolution > 0 {
            spec = spec.with_resolution(resolution);
        }
        let graph = zoo::build(&spec, seed)?;
        *out = Box::into_raw(Box::new(CzModel { graph }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`cz_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cz_model_free(model: *mut CzModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Per-sample input extents.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cz_model_input_shape(
    model: *const CzModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> CzStatus {
    guard(|| {
        let spec = model_ref(model)?.graph.input_spec();
        *out_ref(channels, "channels")? = spec.channels;
        *out_ref(height, "height")? = spec.height;
        *out_ref(width, "width")? = spec.width;
        Ok(())
    })
}

/// Number of values [`cz_model_predict`] writes per sample: class
/// probabilities, followed by four box coordinates for detectors.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cz_model_output_len(model: *const CzModel, len: *mut usize) -> CzStatus {
    guard(|| {
        *out_ref(len, "len")? = model_ref(model)?.graph.output_spec().channels();
        Ok(())
    })
}

/// Trainable parameters, frozen parameters and non-trainable buffers.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cz_model_param_counts(
    model: *const CzModel,
    trainable: *mut u64,
    frozen: *mut u64,
    buffers: *mut u64,
) -> CzStatus {
    guard(|| {
        let totals = audit(&model_ref(model)?.graph)?.totals;
        *out_ref(trainable, "trainable")? = totals.params_trainable as u64;
        *out_ref(frozen, "frozen")? = totals.params_frozen as u64;
        *out_ref(buffers, "buffers")? = totals.buffers as u64;
        Ok(())
    })
}

/// Per-layer footprint audit as a JSON document. Release the result with
/// [`cz_string_free`].
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cz_model_audit_json(model: *const CzModel, out: *mut *mut c_char) -> CzStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let report = audit(&model_ref(model)?.graph)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| fail(CzStatus::Internal, e.to_string()))?;
        *out = into_c_string(json)?;
        Ok(())
    })
}

/// Sets the trainable flag of every parameter whose name starts with
/// `prefix`; `matched` (may be null) receives the number of entries.
///
/// # Safety
/// `model` must be a live handle and `prefix` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cz_model_set_trainable(
    model: *mut CzModel,
    prefix: *const c_char,
    trainable: bool,
    matched: *mut usize,
) -> CzStatus {
    guard(|| {
        let m = model_mut(model)?;
        let n = m.graph.set_trainable(str_arg(prefix, "prefix")?, trainable)?;
        if let Some(matched) = matched.as_mut() {
            *matched = n;
        }
        Ok(())
    })
}

/// Freezes every parameter outside the classification head.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cz_model_freeze_backbone(model: *mut CzModel) -> CzStatus {
    guard(|| {
        freeze_backbone(&mut model_mut(model)?.graph)?;
        Ok(())
    })
}

/// Writes the model's parameters, buffers and trainable flags to a CNT1
/// checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cz_model_save(model: *const CzModel, path: *const c_char) -> CzStatus {
    guard(|| {
        save_checkpoint(&model_ref(model)?.graph, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Loads a checkpoint written for the same architecture. On failure the
/// model is unchanged.
///
/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cz_model_load(model: *mut CzModel, path: *const c_char) -> CzStatus {
    guard(|| {
        let m = model_mut(model)?;
        load_checkpoint(&mut m.graph, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Inference on `batch` samples laid out as `(batch, c, h, w)` row-major.
/// Writes `batch * output_len` values to `out`, which must have room for
/// `out_len` floats.
///
/// # Safety
/// `input` must point to `batch * c * h * w` floats and `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn cz_model_predict(
    model: *mut CzModel,
    input: *const f32,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> CzStatus {
    guard(|| {
        let m = model_mut(model)?;
        if input.is_null() || out.is_null() {
            return Err(fail(CzStatus::NullArgument, "input or output buffer is null"));
        }
        if batch == 0 {
            return Err(fail(CzStatus::InvalidArgument, "batch must be at least 1"));
        }
        let shape = m.graph.input_spec().batch_shape(batch);
        let need = batch * m.graph.output_spec().channels();
        if out_len < need {
            return Err(fail(CzStatus::BufferTooSmall, format!("output buffer holds {out_len} values, {need} needed")));
        }
        let x = Tensor::from_vec(shape, std::slice::from_raw_parts(input, shape.len()).to_vec())?;
        let y = m.graph.predict(&x)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(y.data());
        Ok(())
    })
}

/// Intersection over union of two `x1, y1, x2, y2` boxes.
///
/// # Safety
/// `a` and `b` must point to four floats each, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cz_iou(a: *const f32, b: *const f32, out: *mut f64) -> CzStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(fail(CzStatus::NullArgument, "box pointer is null"));
        }
        let (a, b) = (std::slice::from_raw_parts(a, 4), std::slice::from_raw_parts(b, 4));
        let bbox = |c: &[f32]| BBox::new(c[0], c[1], c[2], c[3]);
        *out_ref(out, "out")? = iou(&bbox(a), &bbox(b));
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cz_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
