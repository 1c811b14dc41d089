//! C ABI over the codec.
//!
//! Every function returns a [`CtxvcStatus`]; on failure the message is
//! available from [`ctxvc_last_error`] on the same thread. Objects are
//! opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use candle_core::{DType, Device};
use ctxvc::bitstream::codec::{decode_sequence, encode_sequence_gop};
use ctxvc::bitstream::container::BitstreamContainer;
use ctxvc::bitstream::intra::{IntraRegistry, LosslessDeflate};
use ctxvc::contextual_codec::CodecConfig;
use ctxvc::entropy_model::EntropyMode;
use ctxvc::metrics::{bd_rate, psnr, RDCurve, RDPoint};
use ctxvc::model::{CodecModel, ModelConfig};
use ctxvc::training::load_checkpoint;
use ctxvc::video_io::{FrameSequence, FrameTensor};
use ctxvc::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtxvcStatus {
    Ok = 0,
    NullPointer = 1,
    Argument = 2,
    MalformedInput = 3,
    Corruption = 4,
    Config = 5,
    UnsupportedCodec = 6,
    Io = 7,
    Internal = 8,
    Panic = 9,
}

/// Loaded model weights.
pub struct CtxvcModel {
    model: CodecModel,
}

/// Decoded frames, 8-bit RGB.
pub struct CtxvcFrames {
    width: usize,
    height: usize,
    frames: Vec<Vec<u8>>,
}

/// Byte buffer owned by the library; release with [`ctxvc_buffer_free`].
#[repr(C)]
pub struct CtxvcBuffer {
    pub data: *mut u8,
    pub len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CtxvcStatus {
    match e {
        Error::Argument(_) | Error::Parameter(_) | Error::Contract(_) | Error::Overlap => CtxvcStatus::Argument,
        Error::MalformedInput(_) | Error::EmptyInput(_) | Error::Json(_) | Error::Image(_) => CtxvcStatus::MalformedInput,
        Error::Corruption { .. } | Error::Range(_) => CtxvcStatus::Corruption,
        Error::Config(_) => CtxvcStatus::Config,
        Error::UnsupportedCodec(_) => CtxvcStatus::UnsupportedCodec,
        Error::Io { .. } => CtxvcStatus::Io,
        _ => CtxvcStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), CtxvcStatus>) -> CtxvcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CtxvcStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside ctxvc".into());
            CtxvcStatus::Panic
        }
    }
}

fn fail(e: Error) -> CtxvcStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null_check<T>(p: *const T, what: &str) -> Result<(), CtxvcStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(CtxvcStatus::NullPointer);
    }
    Ok(())
}

fn arg(msg: &str) -> CtxvcStatus {
    set_error(msg.into());
    CtxvcStatus::Argument
}

/// Message of the last failure on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn ctxvc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn ctxvc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_model_load(path: *const c_char, out: *mut *mut CtxvcModel) -> CtxvcStatus {
    guard(|| {
        null_check(path, "path")?;
        null_check(out, "out")?;
        let p = CStr::from_ptr(path).to_str().map_err(|_| arg("path is not UTF-8"))?;
        let ck = load_checkpoint(Path::new(p), DType::F32, &Device::Cpu).map_err(fail)?;
        *out = Box::into_raw(Box::new(CtxvcModel { model: ck.model }));
        Ok(())
    })
}

/// Creates a small randomly initialized model (for tests and bindings smoke checks).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_model_new_random(seed: u64, out: *mut *mut CtxvcModel) -> CtxvcStatus {
    guard(|| {
        null_check(out, "out")?;
        let config = ModelConfig { seed, ..ModelConfig::tiny() };
        let model = CodecModel::new(config, DType::F32, &Device::Cpu).map_err(fail)?;
        *out = Box::into_raw(Box::new(CtxvcModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_model_free(model: *mut CtxvcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Encodes `count` RGB8 frames (`width * height * 3` bytes each, packed)
/// with lossless intra frames every `gop` frames.
/// `entropy_mode` uses the container byte codes; 255 keeps the model default.
///
/// # Safety
/// `rgb` must hold `count * width * height * 3` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_encode_rgb8(
    model: *const CtxvcModel,
    rgb: *const u8,
    count: usize,
    width: usize,
    height: usize,
    gop: usize,
    entropy_mode: u8,
    out: *mut CtxvcBuffer,
) -> CtxvcStatus {
    guard(|| {
        null_check(model, "model")?;
        null_check(rgb, "rgb")?;
        null_check(out, "out")?;
        let model = &(*model).model;
        let frame_len = width.checked_mul(height).and_then(|n| n.checked_mul(3)).ok_or_else(|| arg("frame size overflows"))?;
        let total = frame_len.checked_mul(count).ok_or_else(|| arg("input size overflows"))?;
        if frame_len == 0 || count == 0 {
            return Err(arg("empty input"));
        }
        let bytes = std::slice::from_raw_parts(rgb, total);
        let frames = bytes
            .chunks_exact(frame_len)
            .map(|c| FrameTensor::new(width, height, rgb_to_planar(c, width, height)))
            .collect::<ctxvc::Result<Vec<_>>>()
            .map_err(fail)?;
        let seq = FrameSequence::new(frames, 30.0).map_err(fail)?;
        let mode = match entropy_mode {
            255 => model.codec().entropy_mode,
            b => EntropyMode::from_byte(b).ok_or_else(|| arg("unknown entropy mode code"))?,
        };
        let config = CodecConfig { entropy_mode: mode, ..*model.codec() };
        let enc = encode_sequence_gop(&seq, gop, model, &config, &LosslessDeflate).map_err(fail)?;
        let data = enc.container.to_bytes().map_err(fail)?.into_boxed_slice();
        let len = data.len();
        *out = CtxvcBuffer { data: Box::into_raw(data).cast(), len };
        Ok(())
    })
}

fn rgb_to_planar(c: &[u8], w: usize, h: usize) -> Vec<f32> {
    let mut v = vec![0.0; 3 * w * h];
    for (i, px) in c.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            v[ch * w * h + i] = px[ch] as f32 / 255.0;
        }
    }
    v
}

/// # Safety
/// `buf` must come from this library; it is reset to empty.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_buffer_free(buf: *mut CtxvcBuffer) {
    if buf.is_null() || (*buf).data.is_null() {
        return;
    }
    let b = &mut *buf;
    drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    b.data = ptr::null_mut();
    b.len = 0;
}

/// Decodes a container.
///
/// # Safety
/// `data` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_decode(
    model: *const CtxvcModel,
    data: *const u8,
    len: usize,
    out: *mut *mut CtxvcFrames,
) -> CtxvcStatus {
    guard(|| {
        null_check(model, "model")?;
        null_check(data, "data")?;
        null_check(out, "out")?;
        let bytes = std::slice::from_raw_parts(data, len);
        let container = BitstreamContainer::from_bytes(bytes).map_err(fail)?;
        let lossless = LosslessDeflate;
        let mut reg = IntraRegistry::new();
        reg.register(&lossless);
        let model = &(*model).model;
        if let Some(t) = &model.intra {
            reg.register(t);
        }
        let seq = decode_sequence(&container, model, &reg).map_err(fail)?;
        let frames = seq.frames().iter().map(|f| f.to_rgb8().into_raw()).collect();
        *out = Box::into_raw(Box::new(CtxvcFrames { width: seq.width(), height: seq.height(), frames }));
        Ok(())
    })
}

/// # Safety
/// `frames` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_frames_info(
    frames: *const CtxvcFrames,
    count: *mut usize,
    width: *mut usize,
    height: *mut usize,
) -> CtxvcStatus {
    guard(|| {
        null_check(frames, "frames")?;
        let f = &*frames;
        for (p, v) in [(count, f.frames.len()), (width, f.width), (height, f.height)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies frame `index` as packed RGB8 into `dst` (`width * height * 3` bytes).
///
/// # Safety
/// `dst` must hold `dst_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_frames_copy_rgb8(
    frames: *const CtxvcFrames,
    index: usize,
    dst: *mut u8,
    dst_len: usize,
) -> CtxvcStatus {
    guard(|| {
        null_check(frames, "frames")?;
        null_check(dst, "dst")?;
        let f = (&(*frames).frames).get(index).ok_or_else(|| arg("frame index out of range"))?;
        if dst_len < f.len() {
            return Err(arg("destination buffer too small"));
        }
        ptr::copy_nonoverlapping(f.as_ptr(), dst, f.len());
        Ok(())
    })
}

/// # Safety
/// `frames` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_frames_free(frames: *mut CtxvcFrames) {
    if !frames.is_null() {
        drop(Box::from_raw(frames));
    }
}

/// PSNR in dB (capped at 100) of two packed RGB8 frames.
///
/// # Safety
/// `a` and `b` must hold `width * height * 3` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_psnr_rgb8(a: *const u8, b: *const u8, width: usize, height: usize, out: *mut f64) -> CtxvcStatus {
    guard(|| {
        null_check(a, "a")?;
        null_check(b, "b")?;
        null_check(out, "out")?;
        let n = width.checked_mul(height).and_then(|v| v.checked_mul(3)).filter(|&v| v > 0).ok_or_else(|| arg("bad frame size"))?;
        let fa = FrameTensor::new(width, height, rgb_to_planar(std::slice::from_raw_parts(a, n), width, height)).map_err(fail)?;
        let fb = FrameTensor::new(width, height, rgb_to_planar(std::slice::from_raw_parts(b, n), width, height)).map_err(fail)?;
        *out = psnr(&fa, &fb).map_err(fail)?;
        Ok(())
    })
}

/// BD-rate in percent of a test curve against an anchor curve.
///
/// # Safety
/// Each array must hold the stated number of values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ctxvc_bd_rate(
    anchor_bpp: *const f64,
    anchor_quality: *const f64,
    anchor_len: usize,
    test_bpp: *const f64,
    test_quality: *const f64,
    test_len: usize,
    out: *mut f64,
) -> CtxvcStatus {
    guard(|| {
        for (p, n) in [(anchor_bpp, "anchor_bpp"), (anchor_quality, "anchor_quality"), (test_bpp, "test_bpp"), (test_quality, "test_quality")] {
            null_check(p, n)?;
        }
        null_check(out, "out")?;
        let curve = |b: *const f64, q: *const f64, n: usize, label: &str| {
            let b = std::slice::from_raw_parts(b, n);
            let q = std::slice::from_raw_parts(q, n);
            RDCurve::new(label, "", b.iter().zip(q).map(|(&bpp, &quality)| RDPoint { bpp, quality }).collect())
        };
        let a = curve(anchor_bpp, anchor_quality, anchor_len, "anchor").map_err(fail)?;
        let t = curve(test_bpp, test_quality, test_len, "test").map_err(fail)?;
        *out = bd_rate(&a, &t).map_err(fail)?;
        Ok(())
    })
}
