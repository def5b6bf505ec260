//! C ABI over the bitembed runtime.
//!
//! Every fallible function returns a [`BitembedStatus`]. On failure the
//! message is retrievable with [`bitembed_last_error`] on the same thread.
//! Models are opaque handles released with [`bitembed_model_free`]. Handles
//! are immutable after load and may be shared across threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bitembed::audio::{self, Waveform, SAMPLE_RATE};
use bitembed::graph::LayerGraph;
use bitembed::{model_io, Error};

/// Result codes; zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitembedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loaded student model.
pub struct BitembedModel {
    graph: LayerGraph,
}

/// Parameter counts and storage sizes in MiB.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BitembedSizeReport {
    pub param_count_total: u64,
    pub param_count_binary: u64,
    pub param_count_float: u64,
    pub float_size_mb: f64,
    pub quantized_size_mb: f64,
    pub header_bytes: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BitembedStatus {
    match e {
        Error::Io { .. } | Error::Audio { .. } => BitembedStatus::Io,
        Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Crc { .. }
        | Error::TableCrc { .. }
        | Error::Format(_) => {
            BitembedStatus::Format
        }
        Error::Shape(_) => BitembedStatus::Shape,
        Error::NonFinite { .. } => BitembedStatus::Numeric,
        _ => BitembedStatus::InvalidArgument,
    }
}

fn fail(status: BitembedStatus, msg: impl Into<String>) -> BitembedStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting library errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), BitembedStatus>) -> BitembedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BitembedStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(BitembedStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

fn lib(e: Error) -> BitembedStatus {
    let s = status_of(&e);
    fail(s, e.to_string())
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), BitembedStatus> {
    if p.is_null() {
        Err(fail(BitembedStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `samples` must point to `len` readable floats (may be null when `len == 0`).
unsafe fn waveform(samples: *const f32, len: usize, sample_rate: u32) -> Result<Waveform, BitembedStatus> {
    let data = if len == 0 {
        Vec::new()
    } else {
        non_null(samples, "samples")?;
        std::slice::from_raw_parts(samples, len).to_vec()
    };
    let w = Waveform::new(data, sample_rate).map_err(lib)?;
    audio::resample_linear(&w, SAMPLE_RATE).map_err(lib)
}

/// # Safety
/// `out` must point to `out_len` writable floats.
unsafe fn write_out(v: &[f32], out: *mut f32, out_len: usize) -> Result<(), BitembedStatus> {
    if out_len < v.len() {
        return Err(fail(
            BitembedStatus::BufferTooSmall,
            format!("output needs {} floats, got {out_len}", v.len()),
        ));
    }
    non_null(out, "out")?;
    ptr::copy_nonoverlapping(v.as_ptr(), out, v.len());
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bitembed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model file into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bitembed_model_load(path: *const c_char, out: *mut *mut BitembedModel) -> BitembedStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(BitembedStatus::InvalidArgument, "path is not UTF-8"))?;
        let graph = model_io::load(p).map_err(lib)?;
        *out = Box::into_raw(Box::new(BitembedModel { graph }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`bitembed_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bitembed_model_free(model: *mut BitembedModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bitembed_model_embedding_dim(model: *const BitembedModel, out: *mut usize) -> BitembedStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).graph.embedding_dim();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bitembed_model_size_report(
    model: *const BitembedModel,
    out: *mut BitembedSizeReport,
) -> BitembedStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let r = model_io::size_report(&(*model).graph);
        *out = BitembedSizeReport {
            param_count_total: r.param_count_total as u64,
            param_count_binary: r.param_count_binary as u64,
            param_count_float: r.param_count_float as u64,
            float_size_mb: r.float_size_mb,
            quantized_size_mb: r.quantized_size_mb,
            header_bytes: r.header_bytes as u64,
        };
        Ok(())
    })
}

/// Log-mel spectrogram (frames × 64, row-major) of a mono waveform at any
/// sample rate. `*frames` receives the frame count even when `out` is too
/// small, so a first call with `out_len == 0` sizes the buffer.
///
/// # Safety
/// `samples` must hold `len` floats; `out` must hold `out_len` floats;
/// `frames` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bitembed_log_mel(
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    out: *mut f32,
    out_len: usize,
    frames: *mut usize,
) -> BitembedStatus {
    guard(|| {
        non_null(frames, "frames")?;
        let w = waveform(samples, len, sample_rate)?;
        let m = audio::log_mel(&w).map_err(lib)?;
        *frames = m.frames;
        write_out(&m.data, out, out_len)
    })
}

/// Embeds the first one-second window of a mono waveform (zero-padded when
/// shorter) into `out[0..embedding_dim]`.
///
/// # Safety
/// `model` must be a live handle; `samples` must hold `len` floats; `out`
/// must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn bitembed_embed_waveform(
    model: *const BitembedModel,
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    out: *mut f32,
    out_len: usize,
) -> BitembedStatus {
    guard(|| {
        non_null(model, "model")?;
        let w = waveform(samples, len, sample_rate)?;
        let x = audio::segment_input(&w, 0).map_err(lib)?;
        let e = (*model).graph.forward(&x).map_err(lib)?;
        write_out(e.data(), out, out_len)
    })
}

/// Embeds a precomputed 98 × 64 log-mel patch (row-major, `len == 6272`).
///
/// # Safety
/// `model` must be a live handle; `logmel` must hold `len` floats; `out`
/// must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn bitembed_embed_log_mel(
    model: *const BitembedModel,
    logmel: *const f32,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> BitembedStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(logmel, "logmel")?;
        let want = audio::INPUT_FRAMES * audio::N_MELS;
        if len != want {
            return Err(fail(
                BitembedStatus::Shape,
                format!("log-mel input needs {want} floats, got {len}"),
            ));
        }
        let m = audio::LogMelSpectrogram {
            frames: audio::INPUT_FRAMES,
            data: std::slice::from_raw_parts(logmel, len).to_vec(),
        };
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(fail(BitembedStatus::Numeric, "log-mel input is not finite"));
        }
        let e = (*model).graph.forward_logmel(&m).map_err(lib)?;
        write_out(e.data(), out, out_len)
    })
}
