//! C ABI over the detseg inference pipeline.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `*_free`. Every fallible call returns a [`DsStatus`] and
//! leaves a message for [`ds_last_error`] on failure. The message is
//! per-thread and valid until the next failing call on that thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use candle_core::Device;
use detseg::checkpoint::Checkpoint;
use detseg::data::{collate, SampleRecord};
use detseg::geometry::{iou_xyxy, PairwiseMatrix};
use detseg::matching::hungarian;
use detseg::model::Model;
use detseg::segmenter::Instance;
use detseg::Error;
use image::RgbImage;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    InvalidArgument = 1,
    Data = 2,
    VersionMismatch = 3,
    Runtime = 4,
    Panic = 5,
}

/// Loaded model. Not safe to share between threads without external locking.
pub struct DsModel {
    model: Model,
}

/// Instances produced by one inference call.
pub struct DsResult {
    width: u32,
    height: u32,
    instances: Vec<Instance>,
}

/// One detected instance. `bbox` is `x1, y1, x2, y2` in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DsInstance {
    pub class_id: u32,
    pub confidence: f64,
    pub bbox: [f64; 4],
    pub mask_area: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn status_of(e: &Error) -> DsStatus {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => DsStatus::InvalidArgument,
        Error::VersionMismatch { .. } => DsStatus::VersionMismatch,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Json(_) => DsStatus::Data,
        Error::Tensor(_) | Error::NonFiniteLoss { .. } => DsStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DsStatus, String)>) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DsStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DsStatus, String) {
    (status_of(&e), e.to_string())
}

fn invalid(msg: &str) -> (DsStatus, String) {
    (DsStatus::InvalidArgument, msg.to_string())
}

/// Library name and version, static storage.
#[no_mangle]
pub extern "C" fn ds_version() -> *const c_char {
    static V: &CStr = match CStr::from_bytes_with_nul(concat!("detseg ", env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    V.as_ptr()
}

/// Message of the last failure on this thread, or an empty string.
#[no_mangle]
pub extern "C" fn ds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by the same library version.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_model_load(path: *const c_char, out: *mut *mut DsModel) -> DsStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(invalid("null argument"));
        }
        *out = std::ptr::null_mut();
        let p = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let model = Checkpoint::load(Path::new(p)).and_then(|c| c.to_model(&Device::Cpu)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DsModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ds_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_model_free(model: *mut DsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of object classes, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ds_model_num_classes(model: *const DsModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.catalog().len() as u32)
}

/// Segments one packed RGB8 image. Rows are `stride` bytes apart
/// (`stride >= 3 * width`). A negative `score_threshold` uses the model's own.
///
/// # Safety
/// `rgb` must point to `stride * height` readable bytes; `model` must be a
/// live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_model_infer(
    model: *const DsModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    stride: usize,
    score_threshold: f64,
    out: *mut *mut DsResult,
) -> DsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("null model"))?;
        if rgb.is_null() || out.is_null() {
            return Err(invalid("null argument"));
        }
        *out = std::ptr::null_mut();
        if width == 0 || height == 0 {
            return Err(invalid("image has zero size"));
        }
        let row = 3 * width as usize;
        if stride < row {
            return Err(invalid("stride is smaller than 3 * width"));
        }
        if score_threshold > 1.0 || score_threshold.is_nan() {
            return Err(invalid("score threshold must be at most 1"));
        }
        let bytes = std::slice::from_raw_parts(rgb, stride * height as usize);
        let mut packed = Vec::with_capacity(row * height as usize);
        for r in bytes.chunks(stride) {
            packed.extend_from_slice(&r[..row]);
        }
        let img = RgbImage::from_raw(width, height, packed).ok_or_else(|| invalid("image buffer size"))?;
        let cfg = m.model.config();
        let threshold = if score_threshold < 0.0 { cfg.score_threshold } else { score_threshold };
        let sample = SampleRecord::unlabeled("input", img);
        let batch = collate(&[&sample], cfg.image_size, m.model.size_multiple(), &cfg.normalization(), m.model.device())
            .map_err(lib_err)?;
        let pred = m.model.predict(&batch, threshold).map_err(lib_err)?.remove(0);
        *out = Box::into_raw(Box::new(DsResult {
            width,
            height,
            instances: pred.instances,
        }));
        Ok(())
    })
}

/// # Safety
/// `result` must come from [`ds_model_infer`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_result_free(result: *mut DsResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Instance count, 0 for a null handle.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ds_result_count(result: *const DsResult) -> usize {
    result.as_ref().map_or(0, |r| r.instances.len())
}

/// Instances are ordered by decreasing confidence.
///
/// # Safety
/// `result` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_result_instance(result: *const DsResult, index: usize, out: *mut DsInstance) -> DsStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| invalid("null result"))?;
        let out = out.as_mut().ok_or_else(|| invalid("null output"))?;
        let inst = r.instances.get(index).ok_or_else(|| invalid("instance index out of range"))?;
        *out = DsInstance {
            class_id: inst.class_id,
            confidence: inst.confidence,
            bbox: inst.bbox.coords(),
            mask_area: inst.mask.area() as u64,
        };
        Ok(())
    })
}

/// Writes the instance mask as `width * height` bytes, row-major, 1 inside.
///
/// # Safety
/// `result` must be a live handle and `buf` must hold `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ds_result_mask(result: *const DsResult, index: usize, buf: *mut u8, len: usize) -> DsStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| invalid("null result"))?;
        if buf.is_null() {
            return Err(invalid("null buffer"));
        }
        let inst = r.instances.get(index).ok_or_else(|| invalid("instance index out of range"))?;
        let need = r.width as usize * r.height as usize;
        if len < need {
            return Err(invalid("mask buffer is smaller than width * height"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, need);
        for (d, &v) in dst.iter_mut().zip(inst.mask.data()) {
            *d = v as u8;
        }
        Ok(())
    })
}

/// IoU of two `x1, y1, x2, y2` boxes; 0 when the union is empty.
///
/// # Safety
/// `a` and `b` must each point to four doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_box_iou(a: *const f64, b: *const f64) -> f64 {
    if a.is_null() || b.is_null() {
        return 0.0;
    }
    let a: [f64; 4] = std::ptr::read(a.cast());
    let b: [f64; 4] = std::ptr::read(b.cast());
    iou_xyxy(a, b)
}

/// Minimum-cost assignment of a row-major `rows x cols` cost matrix.
/// `out_col[i]` receives the column matched to row `i`, or -1.
///
/// # Safety
/// `cost` must hold `rows * cols` doubles and `out_col` `rows` writable slots.
#[no_mangle]
pub unsafe extern "C" fn ds_hungarian(cost: *const f64, rows: usize, cols: usize, out_col: *mut i64) -> DsStatus {
    guard(|| {
        if (cost.is_null() && rows * cols > 0) || (out_col.is_null() && rows > 0) {
            return Err(invalid("null argument"));
        }
        let values = if rows * cols == 0 { Vec::new() } else { std::slice::from_raw_parts(cost, rows * cols).to_vec() };
        let m = PairwiseMatrix::new(rows, cols, values).map_err(lib_err)?;
        let a = hungarian(&m).map_err(lib_err)?;
        if rows > 0 {
            let out = std::slice::from_raw_parts_mut(out_col, rows);
            out.fill(-1);
            for (i, j) in a.pairs {
                out[i] = j as i64;
            }
        }
        Ok(())
    })
}
