//! C ABI for loading trained detectors and scoring articles.
//!
//! Every fallible function returns a [`PcnnStatus`]. On failure a message
//! describing the last error on the calling thread is available from
//! [`pcnn_last_error_message`]. Strings handed out by the library must be
//! released with [`pcnn_string_free`]; models with [`pcnn_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pcnn::corpus::{Article, ArticleRecord};
use pcnn::pipeline::explain;
use pcnn::trainer;
use pcnn::{Error, ErrorKind, Model};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcnnStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid settings or an incompatible checkpoint version.
    Config = 3,
    /// Malformed input: bad JSON, unreadable or corrupt file.
    Data = 4,
    /// Numerical or internal failure.
    Runtime = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Opaque handle to a loaded model.
pub struct PcnnModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    let c = CString::new(msg).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> PcnnStatus {
    match e.kind() {
        ErrorKind::Config => PcnnStatus::Config,
        ErrorKind::Data => PcnnStatus::Data,
        ErrorKind::Runtime => PcnnStatus::Runtime,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), PcnnStatus>) -> PcnnStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PcnnStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PcnnStatus::Panic
        }
    }
}

fn fail(e: Error) -> PcnnStatus {
    set_error(e.to_string());
    status_of(&e)
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, PcnnStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(PcnnStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        PcnnStatus::InvalidUtf8
    })
}

fn into_c_string(s: String) -> Result<*mut c_char, PcnnStatus> {
    CString::new(s).map(CString::into_raw).map_err(|_| {
        set_error("output contains an interior NUL byte");
        PcnnStatus::Runtime
    })
}

fn parse_article(json: &str) -> Result<Article, PcnnStatus> {
    let record: ArticleRecord = serde_json::from_str(json).map_err(|e| fail(Error::Json(e)))?;
    record.into_article().map_err(|m| {
        set_error(m);
        PcnnStatus::Data
    })
}

/// Loads a checkpoint file. On success `*out` receives a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pcnn_model_load(path: *const c_char, out: *mut *mut PcnnModel) -> PcnnStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return Err(PcnnStatus::NullArgument);
        }
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let model = trainer::load_checkpoint(path).map_err(fail)?;
        *out = Box::into_raw(Box::new(PcnnModel { model }));
        Ok(())
    })
}

/// Loads a checkpoint from an in-memory buffer.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pcnn_model_load_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut PcnnModel,
) -> PcnnStatus {
    guard(|| {
        if out.is_null() || data.is_null() {
            set_error("data or out is null");
            return Err(PcnnStatus::NullArgument);
        }
        *out = ptr::null_mut();
        let bytes = std::slice::from_raw_parts(data, len);
        let (model, _) = trainer::decode_checkpoint(bytes).map_err(fail)?;
        *out = Box::into_raw(Box::new(PcnnModel { model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pcnn_model_free(model: *mut PcnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Contradiction probability for one article given as a corpus record,
/// `{"page_id", "rev_id", "title", "label", "paragraphs": [[sentence]]}`.
///
/// # Safety
/// `model` must be a live handle, `article_json` NUL-terminated and
/// `out_prob` valid.
#[no_mangle]
pub unsafe extern "C" fn pcnn_predict_prob(
    model: *const PcnnModel,
    article_json: *const c_char,
    out_prob: *mut f64,
) -> PcnnStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out_prob.is_null()) else {
            set_error("model or out_prob is null");
            return Err(PcnnStatus::NullArgument);
        };
        let article = parse_article(read_str(article_json, "article_json")?)?;
        *out_prob = m.model.predict_prob(&article).map_err(fail)?;
        Ok(())
    })
}

/// Prediction with ranked sentence pairs as JSON. `top` limits the pair
/// list; 0 returns every pair. The result must be freed with
/// [`pcnn_string_free`].
///
/// # Safety
/// `model` must be a live handle, `article_json` NUL-terminated and `out`
/// valid.
#[no_mangle]
pub unsafe extern "C" fn pcnn_explain_json(
    model: *const PcnnModel,
    article_json: *const c_char,
    top: usize,
    out: *mut *mut c_char,
) -> PcnnStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            set_error("model or out is null");
            return Err(PcnnStatus::NullArgument);
        };
        *out = ptr::null_mut();
        let article = parse_article(read_str(article_json, "article_json")?)?;
        let top = (top > 0).then_some(top);
        let exp = explain(&m.model, &article, top).map_err(fail)?;
        let text = serde_json::to_string(&exp).map_err(|e| fail(Error::Json(e)))?;
        *out = into_c_string(text)?;
        Ok(())
    })
}

/// Same as [`pcnn_explain_json`] for plain text; blank lines separate
/// paragraphs.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pcnn_explain_text(
    model: *const PcnnModel,
    text: *const c_char,
    top: usize,
    out: *mut *mut c_char,
) -> PcnnStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            set_error("model or out is null");
            return Err(PcnnStatus::NullArgument);
        };
        *out = ptr::null_mut();
        let text = read_str(text, "text")?;
        let article = Article::from_text(0, 0, "", 0, text).map_err(fail)?;
        let exp = explain(&m.model, &article, (top > 0).then_some(top)).map_err(fail)?;
        let json = serde_json::to_string(&exp).map_err(|e| fail(Error::Json(e)))?;
        *out = into_c_string(json)?;
        Ok(())
    })
}

/// Model and encoder configuration as JSON.
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pcnn_model_config_json(model: *const PcnnModel, out: *mut *mut c_char) -> PcnnStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            set_error("model or out is null");
            return Err(PcnnStatus::NullArgument);
        };
        *out = ptr::null_mut();
        let value = serde_json::json!({
            "encoder": m.model.encoder.config(),
            "model": m.model.config,
        });
        *out = into_c_string(value.to_string())?;
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pcnn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn pcnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pcnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
