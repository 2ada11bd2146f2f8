// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over `tokenlens`.
//!
//! Bundles and vocabularies are opaque heap handles released with their
//! `*_free` function. Every fallible call returns a [`TlStatus`]; on failure
//! [`tl_last_error_message`] describes the error for the calling thread.
//! Results are JSON strings owned by the caller and released with
//! [`tl_string_free`]. Images are passed as encoded PNG or JPEG bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use serde_json::json;
use tokenlens::engine::{classify_trace, forward_full, TokenRef};
use tokenlens::interpret::{interpret, interpret_layer};
use tokenlens::saliency::token_saliency;
use tokenlens::{preprocess, Error, ImageInput, InterventionPlan, ModelBundle, Vocabulary};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Degenerate = 4,
    Config = 5,
    MissingTensor = 6,
    TensorShape = 7,
    Truncated = 8,
    NonFinite = 9,
    Version = 10,
    Format = 11,
    Compatibility = 12,
    Input = 13,
    NotFound = 14,
    Io = 15,
    Json = 16,
    Image = 17,
    Panic = 18,
}

impl From<&Error> for TlStatus {
    fn from(e: &Error) -> Self {
        match e.code() {
            "dimension" => TlStatus::Dimension,
            "degenerate" => TlStatus::Degenerate,
            "config" => TlStatus::Config,
            "missing_tensor" => TlStatus::MissingTensor,
            "tensor_shape" => TlStatus::TensorShape,
            "truncated" => TlStatus::Truncated,
            "non_finite" => TlStatus::NonFinite,
            "version" => TlStatus::Version,
            "format" => TlStatus::Format,
            "compatibility" => TlStatus::Compatibility,
            "not_found" => TlStatus::NotFound,
            "io" => TlStatus::Io,
            "json" => TlStatus::Json,
            "image" => TlStatus::Image,
            _ => TlStatus::Input,
        }
    }
}

/// Loaded model bundle.
pub struct TlBundle {
    bundle: ModelBundle,
}

/// Loaded vocabulary.
pub struct TlVocab {
    vocab: Vocabulary,
}

struct Fail(TlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(TlStatus::from(&e), e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(TlStatus::Json, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TlStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TlStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TlStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut *mut T, value: *mut T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = value;
    Ok(())
}

unsafe fn write_json(out: *mut *mut c_char, v: &serde_json::Value) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out_json"));
    }
    let s = CString::new(serde_json::to_string(v)?).map_err(|e| Fail(TlStatus::Json, e.to_string()))?;
    *out = s.into_raw();
    Ok(())
}

fn patches(bundle: &ModelBundle, image: &[u8]) -> Result<tokenlens::Tensor, Fail> {
    Ok(preprocess(&ImageInput::from_encoded(image)?, &bundle.manifest)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn tl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a bundle directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tl_bundle_load(path: *const c_char, out: *mut *mut TlBundle) -> TlStatus {
    guard(|| {
        let bundle = ModelBundle::load(Path::new(str_arg(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(TlBundle { bundle })))
    })
}

/// # Safety
/// `bundle` must come from [`tl_bundle_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tl_bundle_free(bundle: *mut TlBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Manifest and content id as JSON.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tl_bundle_summary(bundle: *const TlBundle, out_json: *mut *mut c_char) -> TlStatus {
    guard(|| {
        let b = &ref_arg(bundle, "bundle")?.bundle;
        write_json(
            out_json,
            &json!({"bundle_id": b.id(), "manifest": b.manifest, "seq_len": b.manifest.seq_len()}),
        )
    })
}

/// Loads a vocabulary file; its id is the file stem.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tl_vocab_load(path: *const c_char, out: *mut *mut TlVocab) -> TlStatus {
    guard(|| {
        let vocab = Vocabulary::load(Path::new(str_arg(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(TlVocab { vocab })))
    })
}

/// # Safety
/// `vocab` must come from [`tl_vocab_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tl_vocab_free(vocab: *mut TlVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Number of entries, or 0 for NULL.
///
/// # Safety
/// `vocab` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_vocab_len(vocab: *const TlVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.vocab.len())
}

/// Interpretations of token `(layer, position)`, or of every position of
/// `layer` when `position` is negative. `top_k == 0` keeps the full ranking.
///
/// # Safety
/// Handles must be live; `image` must point to `image_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tl_interpret(
    bundle: *const TlBundle,
    vocab: *const TlVocab,
    image: *const u8,
    image_len: usize,
    layer: usize,
    position: i64,
    top_k: usize,
    out_json: *mut *mut c_char,
) -> TlStatus {
    guard(|| {
        let b = &ref_arg(bundle, "bundle")?.bundle;
        let v = &ref_arg(vocab, "vocab")?.vocab;
        let trace = forward_full(&patches(b, bytes_arg(image, image_len, "image")?)?, b, None)?;
        let k = (top_k > 0).then_some(top_k);
        let result = if position < 0 {
            interpret_layer(layer, &trace, b, v, k, None)?
        } else {
            vec![interpret(TokenRef::new(layer, position as usize), &trace, b, v, k)?]
        };
        write_json(out_json, &serde_json::to_value(result)?)
    })
}

/// Ranking of `vocab` against the final CLS embedding, optionally with an
/// intervention plan (JSON) applied. `plan_json` may be NULL.
///
/// # Safety
/// Handles must be live; `image` must point to `image_len` bytes;
/// `plan_json` must be NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tl_classify(
    bundle: *const TlBundle,
    vocab: *const TlVocab,
    image: *const u8,
    image_len: usize,
    plan_json: *const c_char,
    out_json: *mut *mut c_char,
) -> TlStatus {
    guard(|| {
        let b = &ref_arg(bundle, "bundle")?.bundle;
        let v = &ref_arg(vocab, "vocab")?.vocab;
        let plan = if plan_json.is_null() {
            None
        } else {
            let p = InterventionPlan::from_json(str_arg(plan_json, "plan_json")?)?;
            p.validate(b)?;
            Some(p)
        };
        let trace = forward_full(&patches(b, bytes_arg(image, image_len, "image")?)?, b, plan.as_ref())?;
        write_json(out_json, &serde_json::to_value(classify_trace(&trace, b, v)?)?)
    })
}

/// Rollout saliency grid and mask of token `(layer, position)`.
///
/// # Safety
/// `bundle` must be live; `image` must point to `image_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tl_saliency(
    bundle: *const TlBundle,
    image: *const u8,
    image_len: usize,
    layer: usize,
    position: usize,
    out_json: *mut *mut c_char,
) -> TlStatus {
    guard(|| {
        let b = &ref_arg(bundle, "bundle")?.bundle;
        let token = TokenRef::new(layer, position);
        token.validate(b)?;
        let trace = forward_full(&patches(b, bytes_arg(image, image_len, "image")?)?, b, None)?;
        write_json(out_json, &serde_json::to_value(token_saliency(token, &trace)?)?)
    })
}
