//! C ABI over `strlab`.
//!
//! Every function returns a [`StrlabStatus`]; on failure the message is
//! available from [`strlab_last_error_message`] on the same thread.
//! Strings are NUL-terminated UTF-8. Output strings are written into
//! caller buffers: the needed size (terminator included) is always stored
//! in `*needed`, and [`StrlabStatus::BufferTooSmall`] is returned when the
//! buffer cannot hold it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use strlab::metrics::edit_distance;
use strlab::models::Model;
use strlab::synthgen::GrayImage;
use strlab::textcodec::clean_text;
use strlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    BadCheckpoint = 4,
    BadImage = 5,
    BufferTooSmall = 6,
    InvalidArgument = 7,
    Internal = 8,
}

/// A loaded recognizer. Create with [`strlab_model_load`], release with
/// [`strlab_model_free`].
pub struct StrlabModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("NULs removed"));
}

fn status_of(e: &Error) -> StrlabStatus {
    match e {
        Error::Io(_) => StrlabStatus::Io,
        Error::BadMagic | Error::Corrupt(_) | Error::HashMismatch { .. } | Error::ArchMismatch(_) => StrlabStatus::BadCheckpoint,
        Error::BadImage(_) => StrlabStatus::BadImage,
        Error::InvalidEncoding(_) => StrlabStatus::InvalidUtf8,
        _ => StrlabStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and turning panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), (StrlabStatus, String)>) -> StrlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            StrlabStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            StrlabStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (StrlabStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (StrlabStatus, String) {
    (StrlabStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (StrlabStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| (StrlabStatus::InvalidUtf8, format!("{what}: {e}")))
}

/// # Safety
/// `buf` must be null or valid for `len` bytes; `needed` must be valid.
unsafe fn write_str(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), (StrlabStatus, String)> {
    if needed.is_null() {
        return Err(null("needed"));
    }
    let size = s.len() + 1;
    *needed = size;
    if buf.is_null() || len < size {
        return Err((StrlabStatus::BufferTooSmall, format!("output needs {size} bytes, buffer has {len}")));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn strlab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn strlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn strlab_model_load(path: *const c_char, out: *mut *mut StrlabModel) -> StrlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = read_str(path, "path")?;
        let inner = Model::<f32>::load(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(StrlabModel { inner }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`strlab_model_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn strlab_model_free(model: *mut StrlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input size the model resizes every image to.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn strlab_model_input_size(model: *const StrlabModel, height: *mut usize, width: *mut usize) -> StrlabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        (*height, *width) = m.inner.input_size();
        Ok(())
    })
}

/// Output classes including the CTC blank.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn strlab_model_num_classes(model: *const StrlabModel, out: *mut usize) -> StrlabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.num_classes();
        Ok(())
    })
}

/// Recognizes a row-major grayscale image with values in [0, 1].
///
/// # Safety
/// `pixels` must hold `height * width` floats; `buf` must be valid for
/// `len` bytes or null; `needed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn strlab_model_recognize(
    model: *const StrlabModel,
    pixels: *const f32,
    height: usize,
    width: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> StrlabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let n = height.checked_mul(width).filter(|&n| n > 0).ok_or((StrlabStatus::BadImage, format!("bad image size {height}x{width}")))?;
        let image = GrayImage::new(height, width, std::slice::from_raw_parts(pixels, n).to_vec()).map_err(lib_err)?;
        let text = m.inner.predict(std::slice::from_ref(&image)).map_err(lib_err)?;
        write_str(&text[0], buf, len, needed)
    })
}

/// Codepoint-level Levenshtein distance.
///
/// # Safety
/// `a`, `b` must be NUL-terminated strings and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn strlab_edit_distance(a: *const c_char, b: *const c_char, out: *mut usize) -> StrlabStatus {
    guard(|| {
        let (a, b) = (read_str(a, "a")?, read_str(b, "b")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = edit_distance(a, b);
        Ok(())
    })
}

/// Label cleaning: zero-width, unassigned and private-use codepoints
/// removed, then NFC.
///
/// # Safety
/// `input` must be a NUL-terminated string; `buf` valid for `len` bytes
/// or null; `needed` valid.
#[no_mangle]
pub unsafe extern "C" fn strlab_clean_text(input: *const c_char, buf: *mut c_char, len: usize, needed: *mut usize) -> StrlabStatus {
    guard(|| write_str(&clean_text(read_str(input, "input")?), buf, len, needed))
}
