//! C ABI over the core library: opaque handles, integer error codes, and a
//! per-thread last-error message. See include/lfm_forge.h for the header.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::fs;
use std::ptr;

use lfm_forge::backbone::{build_model, Model, ModelConfig, SessionState};
use lfm_forge::error::Error;
use lfm_forge::tensor::RngSeed;
use lfm_forge::Checkpoint;

pub const LFM_OK: c_int = 0;
pub const LFM_ERR_DIMENSION: c_int = 1;
pub const LFM_ERR_CONFIG: c_int = 2;
pub const LFM_ERR_INPUT: c_int = 3;
pub const LFM_ERR_DOMAIN: c_int = 4;
pub const LFM_ERR_NUMERIC: c_int = 5;
pub const LFM_ERR_CAPACITY: c_int = 6;
pub const LFM_ERR_COMPAT: c_int = 7;
pub const LFM_ERR_DEGENERATE: c_int = 8;
pub const LFM_ERR_PARSE: c_int = 9;
pub const LFM_ERR_IO: c_int = 10;
pub const LFM_ERR_NULL: c_int = 11;
pub const LFM_ERR_UTF8: c_int = 12;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn code_of(err: &Error) -> c_int {
    match err {
        Error::Dimension(_) => LFM_ERR_DIMENSION,
        Error::Config(_) => LFM_ERR_CONFIG,
        Error::Input(_) => LFM_ERR_INPUT,
        Error::Domain(_) => LFM_ERR_DOMAIN,
        Error::Numeric(_) => LFM_ERR_NUMERIC,
        Error::Capacity(_) => LFM_ERR_CAPACITY,
        Error::Compatibility(_) => LFM_ERR_COMPAT,
        Error::Degenerate(_) => LFM_ERR_DEGENERATE,
        Error::Parse(_) => LFM_ERR_PARSE,
        Error::Io(_) => LFM_ERR_IO,
    }
}

fn fail(err: Error) -> c_int {
    let code = code_of(&err);
    set_error(&err.to_string());
    code
}

/// Message for the most recent error on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lfm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(ptr::null(), |c| c.as_ptr())
    })
}

pub struct LfmModel(Model);
pub struct LfmSession(SessionState);

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, c_int> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(LFM_ERR_NULL);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        LFM_ERR_UTF8
    })
}

/// Builds a model from a config JSON string with seeded random parameters.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string and `out` a valid
/// pointer; the returned handle must be released with `lfm_model_free`.
#[no_mangle]
pub unsafe extern "C" fn lfm_model_build(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut LfmModel,
) -> c_int {
    if out.is_null() {
        set_error("null output pointer");
        return LFM_ERR_NULL;
    }
    let json = match cstr(config_json) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let cfg = match ModelConfig::from_json(json) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match build_model(cfg, RngSeed(seed)) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(LfmModel(m)));
            LFM_OK
        }
        Err(e) => fail(e),
    }
}

/// Loads a model from a config JSON file and a checkpoint file.
///
/// # Safety
/// Both paths must be valid NUL-terminated strings; `out` as above.
#[no_mangle]
pub unsafe extern "C" fn lfm_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut LfmModel,
) -> c_int {
    if out.is_null() {
        set_error("null output pointer");
        return LFM_ERR_NULL;
    }
    let (config_path, checkpoint_path) = match (cstr(config_path), cstr(checkpoint_path)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(c), _) | (_, Err(c)) => return c,
    };
    let run = || -> lfm_forge::Result<Model> {
        let cfg = ModelConfig::from_json(&fs::read_to_string(config_path)?)?;
        let params = Checkpoint::load(checkpoint_path)?;
        Model::new(cfg, params)
    };
    match run() {
        Ok(m) => {
            *out = Box::into_raw(Box::new(LfmModel(m)));
            LFM_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `model` must be a handle from a build/load call, or NULL (no-op).
#[no_mangle]
pub unsafe extern "C" fn lfm_model_free(model: *mut LfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn lfm_model_vocab_size(model: *const LfmModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).0.config().vocab_size
}

/// Opens a fresh decode session at position 0.
///
/// # Safety
/// `model` must be a valid handle, `out` a valid pointer; the session must
/// be released with `lfm_session_free` and not outlive the model.
#[no_mangle]
pub unsafe extern "C" fn lfm_session_new(
    model: *const LfmModel,
    out: *mut *mut LfmSession,
) -> c_int {
    if model.is_null() || out.is_null() {
        set_error("null handle");
        return LFM_ERR_NULL;
    }
    *out = Box::into_raw(Box::new(LfmSession((*model).0.new_session())));
    LFM_OK
}

/// # Safety
/// `session` must be a handle from `lfm_session_new`, or NULL (no-op).
#[no_mangle]
pub unsafe extern "C" fn lfm_session_free(session: *mut LfmSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// # Safety
/// `session` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn lfm_session_position(session: *const LfmSession) -> usize {
    if session.is_null() {
        return 0;
    }
    (*session).0.position()
}

/// # Safety
/// `session` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn lfm_session_state_bytes(session: *const LfmSession) -> usize {
    if session.is_null() {
        return 0;
    }
    (*session).0.state_bytes()
}

/// Feeds one token and writes vocab_size logits into `logits_out`.
///
/// # Safety
/// `logits_out` must point to at least vocab_size floats; handles as above.
#[no_mangle]
pub unsafe extern "C" fn lfm_decode_step(
    model: *const LfmModel,
    session: *mut LfmSession,
    token: u32,
    logits_out: *mut f32,
) -> c_int {
    if model.is_null() || session.is_null() || logits_out.is_null() {
        set_error("null handle");
        return LFM_ERR_NULL;
    }
    match (*model).0.forward_token(token, &mut (*session).0) {
        Ok(logits) => {
            ptr::copy_nonoverlapping(logits.as_ptr(), logits_out, logits.len());
            LFM_OK
        }
        Err(e) => fail(e),
    }
}

/// Feeds a whole prompt; only the final position's logits are written.
///
/// # Safety
/// `tokens` must point to `n_tokens` ids; `logits_out` to vocab_size floats.
#[no_mangle]
pub unsafe extern "C" fn lfm_prefill(
    model: *const LfmModel,
    session: *mut LfmSession,
    tokens: *const u32,
    n_tokens: usize,
    logits_out: *mut f32,
) -> c_int {
    if model.is_null() || session.is_null() || tokens.is_null() || logits_out.is_null() {
        set_error("null handle");
        return LFM_ERR_NULL;
    }
    if n_tokens == 0 {
        set_error("prefill requires at least one token");
        return LFM_ERR_INPUT;
    }
    let toks = std::slice::from_raw_parts(tokens, n_tokens);
    let mut last = Vec::new();
    for &t in toks {
        match (*model).0.forward_token(t, &mut (*session).0) {
            Ok(l) => last = l,
            Err(e) => return fail(e),
        }
    }
    ptr::copy_nonoverlapping(last.as_ptr(), logits_out, last.len());
    LFM_OK
}
