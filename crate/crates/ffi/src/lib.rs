//! C ABI for the engine.
//!
//! Every fallible function returns a [`GqaStatus`]. On failure a message is
//! kept per thread and can be read with [`gqa_last_error`]. Strings handed
//! out by the library must be released with [`gqa_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gqa_core::llm::{parse_score, TokenCounter};
use gqa_core::preprocess::{make_user_key, QueryBundle};
use gqa_core::response::{Pipeline, ReplyRecord};
use gqa_core::service::{build_pipeline, ServiceConfig};
use gqa_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GqaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Config = 4,
    NotFound = 5,
    InvalidState = 6,
    ParseFailure = 7,
    Unavailable = 8,
    Internal = 9,
    Panic = 10,
}

impl From<&Error> for GqaStatus {
    fn from(err: &Error) -> Self {
        match err {
            Error::InvalidIdentifier(_) | Error::InvalidInput(_) | Error::DimensionMismatch { .. } => {
                GqaStatus::InvalidInput
            }
            Error::Config(_) | Error::MalformedCorpus { .. } => GqaStatus::Config,
            Error::NotFound(_) | Error::SourceMissing(_) => GqaStatus::NotFound,
            Error::InvalidState { .. } => GqaStatus::InvalidState,
            Error::ParseFailure { .. } | Error::UnscorableResponse { .. } => GqaStatus::ParseFailure,
            Error::OcrUnavailable(_)
            | Error::EmbeddingUnavailable(_)
            | Error::BackendUnavailable { .. }
            | Error::SearchUnavailable(_)
            | Error::ModerationUnavailable(_) => GqaStatus::Unavailable,
            _ => GqaStatus::Internal,
        }
    }
}

/// Opaque engine handle.
pub struct GqaEngine {
    pipeline: Pipeline,
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

struct Fail(GqaStatus, String);

impl From<Error> for Fail {
    fn from(err: Error) -> Self {
        Fail(GqaStatus::from(&err), err.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GqaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GqaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside gqa".into());
            GqaStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the call.
unsafe fn arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(GqaStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(GqaStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn out_ptr<T>(out: *mut T, name: &str) -> Result<(), Fail> {
    if out.is_null() {
        Err(Fail(GqaStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn to_c(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|e| Fail(GqaStatus::Internal, e.to_string()))
}

fn json_out(value: &ReplyRecord) -> Result<*mut c_char, Fail> {
    to_c(serde_json::to_string(value).map_err(|e| Fail(GqaStatus::Internal, e.to_string()))?)
}

/// Message from the last failed call on this thread, or null. Owned by the
/// library and valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds an engine from a config file.
///
/// # Safety
/// `config_path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gqa_engine_open(config_path: *const c_char, out: *mut *mut GqaEngine) -> GqaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = arg(config_path, "config_path")?;
        let cfg = ServiceConfig::load(Path::new(path))?;
        let engine = Box::new(GqaEngine {
            pipeline: build_pipeline(&cfg)?,
        });
        *out = Box::into_raw(engine);
        Ok(())
    })
}

/// Engine over built-in demo documents and a scripted model backend, with
/// nothing written to disk.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gqa_engine_open_demo(out: *mut *mut GqaEngine) -> GqaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let (pipeline, _, _) = gqa_core::testing::fixtures::pipeline();
        *out = Box::into_raw(Box::new(GqaEngine { pipeline }));
        Ok(())
    })
}

/// Runs one question and writes the reply record as JSON to `out_json`.
///
/// # Safety
/// `engine` must come from an open function; string arguments must be valid
/// C strings; `out_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gqa_engine_query(
    engine: *const GqaEngine,
    group_id: *const c_char,
    user_id: *const c_char,
    text: *const c_char,
    timestamp: i64,
    out_json: *mut *mut c_char,
) -> GqaStatus {
    guard(|| {
        out_ptr(out_json, "out_json")?;
        let engine = engine.as_ref().ok_or(Fail(GqaStatus::NullArgument, "engine is null".into()))?;
        let key = make_user_key(arg(group_id, "group_id")?, arg(user_id, "user_id")?)?;
        let bundle = QueryBundle::single(key, arg(text, "text")?, timestamp, &format!("ffi-{timestamp}"));
        let record = engine.pipeline.run(&bundle)?;
        *out_json = json_out(&record)?;
        Ok(())
    })
}

/// Recalls a sent reply; writes the updated record as JSON to `out_json`.
///
/// # Safety
/// As for [`gqa_engine_query`].
#[no_mangle]
pub unsafe extern "C" fn gqa_engine_withdraw(
    engine: *const GqaEngine,
    reply_id: *const c_char,
    out_json: *mut *mut c_char,
) -> GqaStatus {
    guard(|| {
        out_ptr(out_json, "out_json")?;
        let engine = engine.as_ref().ok_or(Fail(GqaStatus::NullArgument, "engine is null".into()))?;
        let record = engine.pipeline.withdraw(arg(reply_id, "reply_id")?)?;
        *out_json = json_out(&record)?;
        Ok(())
    })
}

/// # Safety
/// `engine` is null or came from an open function and is not used again.
#[no_mangle]
pub unsafe extern "C" fn gqa_engine_free(engine: *mut GqaEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Parses a 0 to 10 score out of model output.
///
/// # Safety
/// `raw` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gqa_parse_score(raw: *const c_char, out: *mut u8) -> GqaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = parse_score(arg(raw, "raw")?)?;
        Ok(())
    })
}

/// Composite per-user key for a group member.
///
/// # Safety
/// Arguments must be valid C strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gqa_make_user_key(
    group_id: *const c_char,
    user_id: *const c_char,
    out: *mut *mut c_char,
) -> GqaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let key = make_user_key(arg(group_id, "group_id")?, arg(user_id, "user_id")?)?;
        *out = to_c(key.as_str().to_owned())?;
        Ok(())
    })
}

/// Token estimate used for budgeting.
///
/// # Safety
/// `text` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gqa_count_tokens(text: *const c_char, out: *mut usize) -> GqaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = TokenCounter::default().count(arg(text, "text")?);
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library, not freed before.
#[no_mangle]
pub unsafe extern "C" fn gqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
