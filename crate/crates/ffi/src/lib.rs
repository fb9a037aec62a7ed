//! C ABI over a trained psearch model.
//!
//! A model is loaded from a full checkpoint into an opaque `PsModel` handle.
//! Every fallible call returns a `PsStatus`; on failure the message is kept
//! per thread and read back with `ps_last_error`. Images are passed as
//! row-major interleaved 8-bit RGB at the model's input size.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use psearch::blocks::FeatureMap;
use psearch::checkpoint;
use psearch::geometry::{self, BBox};
use psearch::model::PersonSearchModel;
use psearch::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    /// The caller's buffer is too small; the required length was written.
    BufferTooSmall = 6,
    Internal = 7,
}

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsDetection {
    pub bbox: PsBox,
    pub score: f64,
}

/// Opaque model handle.
pub struct PsModel {
    inner: PersonSearchModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> PsStatus {
    match e {
        Error::Config(_) => PsStatus::Config,
        Error::Input(_) | Error::Undefined(_) => PsStatus::InvalidArgument,
        Error::Io { .. } | Error::Image { .. } => PsStatus::Io,
        Error::Checkpoint(_) | Error::Json { .. } => PsStatus::Checkpoint,
        Error::Divergence { .. } | Error::Invariant(_) => PsStatus::Internal,
    }
}

fn fail(status: PsStatus, msg: impl Into<String>) -> PsStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), PsStatus>) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PsStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(PsStatus::Internal, "panic inside psearch"),
    }
}

fn lift<T>(r: psearch::Result<T>) -> Result<T, PsStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), PsStatus> {
    if p.is_null() {
        Err(fail(PsStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn to_bbox(b: &PsBox) -> Result<BBox, PsStatus> {
    lift(BBox::new(b.x1, b.y1, b.x2, b.y2))
}

fn from_bbox(b: &BBox) -> PsBox {
    PsBox {
        x1: b.x1,
        y1: b.y1,
        x2: b.x2,
        y2: b.y2,
    }
}

/// # Safety
/// `rgb` must point at `width * height * 3` readable bytes.
unsafe fn image(model: &PersonSearchModel, rgb: *const u8, width: usize, height: usize) -> Result<FeatureMap, PsStatus> {
    non_null(rgb, "rgb")?;
    let (w, h) = model.image_size();
    if (width, height) != (w, h) {
        return Err(fail(
            PsStatus::InvalidArgument,
            format!("image is {width}x{height}, the model expects {w}x{h}"),
        ));
    }
    let n = width * height;
    let px = std::slice::from_raw_parts(rgb, 3 * n);
    let mut data = vec![0.0; 3 * n];
    for (i, p) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = p[c] as f64 / 255.0;
        }
    }
    lift(FeatureMap::from_vec(3, height, width, 1, data))
}

/// Loads a full checkpoint. On success `*out` owns a handle that must be
/// released with `ps_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_model_load(path: *const c_char, out: *mut *mut PsModel) -> PsStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(PsStatus::InvalidArgument, "path is not UTF-8"))?;
        let (inner, _) = lift(checkpoint::load_model(Path::new(path)))?;
        *out = Box::into_raw(Box::new(PsModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `ps_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_model_free(model: *mut PsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected image width and height.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ps_model_image_size(model: *const PsModel, width: *mut usize, height: *mut usize) -> PsStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(width, "width")?;
        non_null(height, "height")?;
        let (w, h) = (*model).inner.image_size();
        *width = w;
        *height = h;
        Ok(())
    })
}

/// Length of one embedding; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_embedding_dim(model: *const PsModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.embedding_dim())
}

/// Detects persons. Writes at most `capacity` detections, best first, and
/// the total count to `*len`. If the count exceeds `capacity` nothing is
/// written to `out` and `PS_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `rgb` holds `width * height * 3` bytes, `out` has room for `capacity`
/// entries (may be null when `capacity` is 0), `len` is writable.
#[no_mangle]
pub unsafe extern "C" fn ps_detect(
    model: *const PsModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut PsDetection,
    capacity: usize,
    len: *mut usize,
) -> PsStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(len, "len")?;
        let m = &(*model).inner;
        let img = image(m, rgb, width, height)?;
        let dets = lift(m.detect(&img))?;
        *len = dets.len();
        if dets.len() > capacity {
            return Err(fail(
                PsStatus::BufferTooSmall,
                format!("{} detections, capacity {capacity}", dets.len()),
            ));
        }
        if !dets.is_empty() {
            non_null(out, "out")?;
            for (i, d) in dets.iter().enumerate() {
                ptr::write(
                    out.add(i),
                    PsDetection {
                        bbox: from_bbox(&d.bbox),
                        score: d.score,
                    },
                );
            }
        }
        Ok(())
    })
}

/// Embeddings for `n` boxes, written row by row into `out`, which must hold
/// `n * ps_model_embedding_dim(model)` values. They are not normalised;
/// compare them by cosine similarity.
///
/// # Safety
/// `rgb` holds `width * height * 3` bytes, `boxes` holds `n` entries, `out`
/// has room for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn ps_embed(
    model: *const PsModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    boxes: *const PsBox,
    n: usize,
    out: *mut f64,
    capacity: usize,
) -> PsStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &(*model).inner;
        let need = n * m.embedding_dim();
        if need > capacity {
            return Err(fail(PsStatus::BufferTooSmall, format!("need {need} values, capacity {capacity}")));
        }
        if n == 0 {
            return Ok(());
        }
        non_null(boxes, "boxes")?;
        non_null(out, "out")?;
        let img = image(m, rgb, width, height)?;
        let bs = std::slice::from_raw_parts(boxes, n)
            .iter()
            .map(to_bbox)
            .collect::<Result<Vec<_>, _>>()?;
        let emb = lift(m.embed(&img, &bs))?;
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (row, e) in dst.chunks_exact_mut(m.embedding_dim()).zip(&emb) {
            row.copy_from_slice(e);
        }
        Ok(())
    })
}

/// Intersection over union of two boxes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_iou(a: PsBox, b: PsBox, out: *mut f64) -> PsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = geometry::iou(&to_bbox(&a)?, &to_bbox(&b)?);
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
