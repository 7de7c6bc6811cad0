//! C ABI over the streaming engine.
//!
//! Models and streams are opaque handles owned by the caller and released
//! with their `_free` function. Every fallible call returns an
//! [`LstrStatus`]; on failure [`lstr_last_error`] describes the cause.
//! Streams own a copy of the weights, so a model may be freed while its
//! streams live on. A handle must not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use lstr_core::model::ModelParams;
use lstr_core::streaming::{ReferenceEngine, StreamingEngine};
use lstr_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LstrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LstrMode {
    /// Cached stage-1 scores; two-stage models only.
    Cached = 0,
    /// Full recomputation at every step; any design.
    Reference = 1,
}

/// A loaded checkpoint.
pub struct LstrModel {
    params: ModelParams,
}

enum Engine {
    Cached(Box<StreamingEngine<f64>>),
    Reference(Box<ReferenceEngine<f64>>),
}

/// One stream's memory and caches.
pub struct LstrStream {
    engine: Engine,
    feature_dim: usize,
    outputs: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(e: &Error) -> LstrStatus {
    match e {
        Error::Io(_) => LstrStatus::Io,
        Error::Format { .. } | Error::MissingParam(_) => LstrStatus::Format,
        Error::ShapeMismatch { .. } | Error::FrameWidth { .. } | Error::LengthMismatch { .. } => {
            LstrStatus::Shape
        }
        Error::Config(_) => LstrStatus::Config,
        _ => LstrStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into a status and a message.
fn guard(f: impl FnOnce() -> Result<(), (LstrStatus, String)>) -> LstrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LstrStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LstrStatus::Panic
        }
    }
}

fn core(e: Error) -> (LstrStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (LstrStatus, String) {
    (LstrStatus::NullArgument, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lstr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lstr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn publish<T>(out: *mut *mut T, value: T) {
    // SAFETY: callers check `out` for null first.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lstr_model_load(path: *const c_char, out: *mut *mut LstrModel) -> LstrStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (LstrStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let params = ModelParams::load(path).map_err(core)?;
        publish(out, LstrModel { params });
        Ok(())
    })
}

/// Loads a checkpoint from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn lstr_model_from_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut LstrModel,
) -> LstrStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = unsafe { slice::from_raw_parts(data, len) };
        let params = ModelParams::from_bytes(bytes).map_err(core)?;
        publish(out, LstrModel { params });
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lstr_model_free(model: *mut LstrModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Frame width the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn lstr_model_feature_dim(model: *const LstrModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.params.config().feature_dim)
}

/// Probabilities per step (classes plus background), or 0 for null.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn lstr_model_outputs(model: *const LstrModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.params.config().outputs())
}

/// Opens a stream with empty memory. `stride` keeps every `stride`-th
/// long-memory frame.
///
/// # Safety
/// `model` must be a live model handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lstr_stream_new(
    model: *const LstrModel,
    mode: LstrMode,
    stride: usize,
    out: *mut *mut LstrStream,
) -> LstrStatus {
    guard(|| {
        let Some(model) = (unsafe { model.as_ref() }) else {
            return Err(null("model"));
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let params = &model.params;
        let engine = match mode {
            LstrMode::Cached => Engine::Cached(Box::new(
                StreamingEngine::new(params)
                    .and_then(|e| e.with_stride(stride))
                    .map_err(core)?,
            )),
            LstrMode::Reference => Engine::Reference(Box::new(
                ReferenceEngine::new(params)
                    .and_then(|e| e.with_stride(stride))
                    .map_err(core)?,
            )),
        };
        publish(
            out,
            LstrStream {
                engine,
                feature_dim: params.config().feature_dim,
                outputs: params.config().outputs(),
            },
        );
        Ok(())
    })
}

/// Pushes one frame and writes the newest position's probabilities.
///
/// # Safety
/// `frame` must hold `frame_len` floats and `probs` have room for
/// `probs_len` floats.
#[no_mangle]
pub unsafe extern "C" fn lstr_stream_step(
    stream: *mut LstrStream,
    frame: *const f32,
    frame_len: usize,
    probs: *mut f32,
    probs_len: usize,
) -> LstrStatus {
    guard(|| {
        let Some(stream) = (unsafe { stream.as_mut() }) else {
            return Err(null("stream"));
        };
        if frame.is_null() {
            return Err(null("frame"));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        if frame_len != stream.feature_dim {
            return Err(core(Error::FrameWidth {
                expected: stream.feature_dim,
                got: frame_len,
            }));
        }
        if probs_len < stream.outputs {
            return Err((
                LstrStatus::Shape,
                format!("probs holds {probs_len} values, {} needed", stream.outputs),
            ));
        }
        let input: Vec<f64> = unsafe { slice::from_raw_parts(frame, frame_len) }
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        let pred = match &mut stream.engine {
            Engine::Cached(e) => e.step(&input),
            Engine::Reference(e) => e.step(&input),
        }
        .map_err(core)?;
        let dst = unsafe { slice::from_raw_parts_mut(probs, stream.outputs) };
        for (d, &p) in dst.iter_mut().zip(pred.newest()) {
            *d = p as f32;
        }
        Ok(())
    })
}

/// Releases a stream. Null is ignored.
///
/// # Safety
/// `stream` must come from [`lstr_stream_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lstr_stream_free(stream: *mut LstrStream) {
    if !stream.is_null() {
        drop(unsafe { Box::from_raw(stream) });
    }
}
