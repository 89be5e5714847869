//! C ABI over the `nes` crate: checkpoint loading, learner-free inference,
//! weight expansion and cost reports.
//!
//! Every function returns a [`NesStatus`]. On failure a message is kept per
//! thread and can be read with [`nes_last_error_message`]. Models are opaque
//! handles released with [`nes_model_free`]; strings returned by the library
//! are released with [`nes_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nes::checkpoint;
use nes::cost::{network_counts, plan_from_multiplier, ArchConfig};
use nes::model::{EpitomeLayer, Model};
use nes::tensor::Tensor;
use nes::NesError;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NesStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    DimensionMismatch = 5,
    OutOfRange = 6,
    InvalidState = 7,
    NonFinite = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A loaded checkpoint.
pub struct NesModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: NesStatus, msg: impl Into<String>) -> NesStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &NesError) -> NesStatus {
    match e {
        NesError::DimensionMismatch { .. } => NesStatus::DimensionMismatch,
        NesError::OutOfRange { .. } => NesStatus::OutOfRange,
        NesError::Config(_) => NesStatus::InvalidArgument,
        NesError::State(_) => NesStatus::InvalidState,
        NesError::Parse { .. } => NesStatus::Parse,
        NesError::NonFinite(_) => NesStatus::NonFinite,
        NesError::Io(_) => NesStatus::Io,
    }
}

fn guarded(f: impl FnOnce() -> Result<(), NesStatus>) -> NesStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NesStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(NesStatus::Panic, "panic inside nes"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, NesStatus>;
}

impl<T> OrStatus<T> for nes::Result<T> {
    fn or_status(self) -> Result<T, NesStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn model_ref<'a>(model: *const NesModel) -> Result<&'a Model, NesStatus> {
    model
        .as_ref()
        .map(|m| &m.model)
        .ok_or_else(|| fail(NesStatus::NullPointer, "model handle is null"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, NesStatus> {
    p.as_mut()
        .ok_or_else(|| fail(NesStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, NesStatus> {
    if p.is_null() {
        return Err(fail(NesStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(NesStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn epitome_layer(model: &Model, layer: usize) -> Result<&EpitomeLayer, NesStatus> {
    let n = model.epitome_layers().count();
    model.epitome_layers().nth(layer).ok_or_else(|| {
        fail(
            NesStatus::OutOfRange,
            format!("layer {layer} out of range: model has {n} epitome layers"),
        )
    })
}

fn into_handle(model: Model, out: &mut *mut NesModel) {
    *out = Box::into_raw(Box::new(NesModel { model }));
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn nes_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn nes_model_load(path: *const c_char, out: *mut *mut NesModel) -> NesStatus {
    guarded(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let model = checkpoint::load(std::path::Path::new(path)).or_status()?;
        into_handle(model, out);
        Ok(())
    })
}

/// Parses a checkpoint held in memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nes_model_load_bytes(bytes: *const u8, len: usize, out: *mut *mut NesModel) -> NesStatus {
    guarded(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if bytes.is_null() {
            return Err(fail(NesStatus::NullPointer, "bytes is null"));
        }
        let data = std::slice::from_raw_parts(bytes, len);
        let model = checkpoint::from_bytes(data).or_status()?;
        into_handle(model, out);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nes_model_free(model: *mut NesModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of epitome-parameterized layers.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nes_model_layer_count(model: *const NesModel, out: *mut usize) -> NesStatus {
    guarded(|| {
        let m = model_ref(model)?;
        *out_ref(out, "out")? = m.epitome_layers().count();
        Ok(())
    })
}

/// Number of f64 values in one input sample.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nes_model_input_len(model: *const NesModel, out: *mut usize) -> NesStatus {
    guarded(|| {
        let m = model_ref(model)?;
        *out_ref(out, "out")? = m.input_shape.iter().product();
        Ok(())
    })
}

/// Number of f64 values produced per sample.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nes_model_output_len(model: *const NesModel, out: *mut usize) -> NesStatus {
    guarded(|| {
        let m = model_ref(model)?;
        *out_ref(out, "out")? = m.output_shape().or_status()?.iter().product();
        Ok(())
    })
}

/// Learner-free inference of one sample laid out channels-last. Writes the
/// outputs and, when `madd` is not null, the measured multiply-adds.
///
/// # Safety
/// `input` must hold `input_len` values, `output` room for `output_len`.
#[no_mangle]
pub unsafe extern "C" fn nes_model_infer(
    model: *const NesModel,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
    madd: *mut u64,
) -> NesStatus {
    guarded(|| {
        let m = model_ref(model)?;
        if input.is_null() || output.is_null() {
            return Err(fail(NesStatus::NullPointer, "input or output is null"));
        }
        let want: usize = m.input_shape.iter().product();
        if input_len != want {
            return Err(fail(
                NesStatus::DimensionMismatch,
                format!("input has {input_len} values, model expects {want}"),
            ));
        }
        let x = Tensor::new(m.input_shape.clone(), std::slice::from_raw_parts(input, input_len).to_vec()).or_status()?;
        let (y, reports) = m.infer(&x).or_status()?;
        if output_len < y.len() {
            return Err(fail(
                NesStatus::BufferTooSmall,
                format!("output buffer holds {output_len} values, {} needed", y.len()),
            ));
        }
        std::slice::from_raw_parts_mut(output, y.len()).copy_from_slice(y.data());
        if let Some(mc) = madd.as_mut() {
            *mc = reports.iter().map(|r| r.measured_madd).sum();
        }
        Ok(())
    })
}

/// Logical weight shape `[w, h, C_in, C_out]` of an epitome layer.
///
/// # Safety
/// `model` must be a live handle and `shape` room for 4 values.
#[no_mangle]
pub unsafe extern "C" fn nes_layer_weight_shape(model: *const NesModel, layer: usize, shape: *mut usize) -> NesStatus {
    guarded(|| {
        let e = epitome_layer(model_ref(model)?, layer)?;
        if shape.is_null() {
            return Err(fail(NesStatus::NullPointer, "shape is null"));
        }
        std::slice::from_raw_parts_mut(shape, 4).copy_from_slice(&e.plan.weight.as_array());
        Ok(())
    })
}

/// Expands an epitome layer with its routing-map indices into the full
/// weight tensor, row-major over `[w, h, C_in, C_out]`.
///
/// # Safety
/// `out` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn nes_layer_expand(model: *const NesModel, layer: usize, out: *mut f64, len: usize) -> NesStatus {
    guarded(|| {
        let e = epitome_layer(model_ref(model)?, layer)?;
        if out.is_null() {
            return Err(fail(NesStatus::NullPointer, "out is null"));
        }
        let w = e.expanded(&e.map.indices()).or_status()?;
        if len < w.len() {
            return Err(fail(
                NesStatus::BufferTooSmall,
                format!("buffer holds {len} values, {} needed", w.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, w.len()).copy_from_slice(w.data());
        Ok(())
    })
}

/// Cost report as JSON for an architecture given as TOML text, or as the name
/// of a bundled architecture. A `multiplier` in `(0, 1]` plans bottleneck
/// epitomes first; 0 reports the architecture as written. Release the
/// returned string with [`nes_string_free`].
///
/// # Safety
/// `config` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nes_cost_report_json(config: *const c_char, multiplier: f64, out: *mut *mut c_char) -> NesStatus {
    guarded(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let text = c_str(config, "config")?;
        let base = match ArchConfig::bundled(text) {
            Ok(c) => c,
            Err(_) => ArchConfig::from_toml(text).or_status()?,
        };
        let cfg = if multiplier == 0.0 {
            base
        } else {
            plan_from_multiplier(&base, multiplier).or_status()?.0
        };
        let report = network_counts(&cfg).or_status()?;
        let json = serde_json::to_string(&report).map_err(|e| fail(NesStatus::InvalidState, e.to_string()))?;
        *out = CString::new(json)
            .map_err(|e| fail(NesStatus::InvalidState, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nes_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
