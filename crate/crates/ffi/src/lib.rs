//! C ABI over `delta-core`.
//!
//! Handles are opaque pointers owned by the caller and released with the matching
//! `*_free` function. Every fallible call returns a [`DeltaStatus`]; on failure the
//! message is kept per thread and can be read with [`delta_last_error_message`].
//! Panics never cross the boundary: they are reported as `DELTA_STATUS_PANIC`.
//!
//! Features are passed row-major as `rows * cols` doubles; probabilities come back
//! row-major as `rows * classes` doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use delta_core::adapt::{Adapter, MethodSpec};
use delta_core::netcore::{forward, load_checkpoint, Checkpoint, ModelState, OptimizerConfig};
use delta_core::normalize::{InitStrategy, NormMode};
use delta_core::{Error, FeatureMatrix};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Numeric = 4,
    Contract = 5,
    State = 6,
    Input = 7,
    Parse = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for DeltaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => DeltaStatus::Config,
            Error::Numeric { .. } => DeltaStatus::Numeric,
            Error::Contract(_) => DeltaStatus::Contract,
            Error::State(_) => DeltaStatus::State,
            Error::Input(_) => DeltaStatus::Input,
            Error::Parse(_) | Error::Json(_) => DeltaStatus::Parse,
            Error::Io(_) => DeltaStatus::Io,
        }
    }
}

/// A trained source model.
pub struct DeltaModel {
    model: ModelState,
}

/// A model copy being adapted online by one method.
pub struct DeltaAdapter {
    inner: Adapter,
}

/// Overrides applied on top of a method preset.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DeltaAdapterOptions {
    /// Test-time EMA coefficient in (0, 1).
    pub alpha: f64,
    /// Class-frequency momentum in (0, 1].
    pub lambda: f64,
    /// Adam learning rate.
    pub lr: f64,
    /// Seed test-time statistics from the source statistics instead of the first batch.
    pub inherit_stats: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(DeltaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(DeltaStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DeltaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DeltaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_owned());
            DeltaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DeltaStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DeltaStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn features_arg(features: *const f64, rows: usize, cols: usize) -> Result<FeatureMatrix, Failure> {
    if features.is_null() {
        return Err(null("features"));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(DeltaStatus::Input, "rows * cols overflows".to_owned()))?;
    let data = std::slice::from_raw_parts(features, n).to_vec();
    Ok(FeatureMatrix::from_vec(rows, cols, data)?)
}

unsafe fn write_probs(probs: &FeatureMatrix, out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out_probs"));
    }
    let src = probs.as_slice();
    if out_len < src.len() {
        return Err(Failure(
            DeltaStatus::BufferTooSmall,
            format!("output buffer holds {out_len} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

fn boxed<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: `out` is non-null and points to writable storage per the call contract.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn delta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if it succeeded.
///
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn delta_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by `delta train-source`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn delta_model_load(path: *const c_char, out: *mut *mut DeltaModel) -> DeltaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let ckpt = load_checkpoint(Path::new(path))?;
        boxed(out, DeltaModel { model: ckpt.model })
    })
}

/// Parses a checkpoint from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn delta_model_from_json(json: *const c_char, out: *mut *mut DeltaModel) -> DeltaStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let ckpt = Checkpoint::from_json(text)?;
        boxed(out, DeltaModel { model: ckpt.model })
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn delta_model_free(model: *mut DeltaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input features, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn delta_model_input_dim(model: *const DeltaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.input_dim())
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn delta_model_classes(model: *const DeltaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.classes())
}

/// Class probabilities of the frozen source model.
///
/// # Safety
/// `features` must hold `rows * cols` doubles and `out_probs` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn delta_model_predict(
    model: *const DeltaModel,
    features: *const f64,
    rows: usize,
    cols: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> DeltaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let x = features_arg(features, rows, cols)?;
        let out = forward(&model.model, &x, NormMode::SourceEma)?;
        write_probs(&out.probs, out_probs, out_len)
    })
}

/// Defaults: alpha 0.95, lambda 0.9, lr 1e-3, first-batch statistics.
#[no_mangle]
pub extern "C" fn delta_adapter_options_default() -> DeltaAdapterOptions {
    let m = MethodSpec::preset("tent").expect("built-in preset");
    DeltaAdapterOptions { alpha: m.alpha, lambda: m.lambda, lr: m.optimizer.lr(), inherit_stats: false }
}

/// Starts an adaptation episode on a copy of `model` with a named method such as
/// `tent+delta`. `options` may be null for the defaults.
///
/// # Safety
/// `model` must be a live handle, `method` a NUL-terminated string, `options` null or
/// valid, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn delta_adapter_new(
    model: *const DeltaModel,
    method: *const c_char,
    options: *const DeltaAdapterOptions,
    out: *mut *mut DeltaAdapter,
) -> DeltaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let name = str_arg(method, "method")?;
        let opts = options.as_ref().copied().unwrap_or_else(|| delta_adapter_options_default());
        let init = if opts.inherit_stats { InitStrategy::Inherit } else { InitStrategy::First };
        let spec = MethodSpec::preset(name)?
            .with_alpha(opts.alpha)
            .with_lambda(opts.lambda)
            .with_optimizer(OptimizerConfig::adam(opts.lr))
            .with_init(init);
        let inner = Adapter::new(&model.model, spec)?;
        boxed(out, DeltaAdapter { inner })
    })
}

/// # Safety
/// `adapter` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn delta_adapter_free(adapter: *mut DeltaAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}

/// Processes one arriving mini-batch: writes its predictions, then adapts.
///
/// # Safety
/// `features` must hold `rows * cols` doubles and `out_probs` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn delta_adapter_step(
    adapter: *mut DeltaAdapter,
    features: *const f64,
    rows: usize,
    cols: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> DeltaStatus {
    guard(|| {
        let adapter = adapter.as_mut().ok_or_else(|| null("adapter"))?;
        let x = features_arg(features, rows, cols)?;
        let needed = rows * adapter.inner.model.classes();
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        if out_len < needed {
            return Err(Failure(
                DeltaStatus::BufferTooSmall,
                format!("output buffer holds {out_len} values, {needed} needed"),
            ));
        }
        let out = adapter.inner.step(&x)?;
        write_probs(&out.predictions, out_probs, out_len)
    })
}

/// Predictions with the current parameters, without adapting.
///
/// # Safety
/// `features` must hold `rows * cols` doubles and `out_probs` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn delta_adapter_predict(
    adapter: *mut DeltaAdapter,
    features: *const f64,
    rows: usize,
    cols: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> DeltaStatus {
    guard(|| {
        let adapter = adapter.as_mut().ok_or_else(|| null("adapter"))?;
        let x = features_arg(features, rows, cols)?;
        let probs = adapter.inner.predict(&x)?;
        write_probs(&probs, out_probs, out_len)
    })
}

/// Number of parameter updates performed so far, or 0 for a null handle.
///
/// # Safety
/// `adapter` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn delta_adapter_updates(adapter: *const DeltaAdapter) -> u64 {
    adapter.as_ref().map_or(0, |a| a.inner.state.updates)
}
