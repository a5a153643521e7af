//! C ABI for embedding the sanitization pipeline in other languages.
//!
//! The surface follows the usual conventions: an opaque engine handle,
//! integer status codes, UTF-8 strings allocated by this library and
//! released with [`provgate_string_free`], and a thread-local last-error
//! message. No callback ever unwinds across the boundary.
//!
//! The generated header lives at `include/provgate.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use provgate::config::{DefenseMode, Thresholds};
use provgate::image::ImageContainer;
use provgate::image::VisualSanitizer;
use provgate::ledger::Ledger;
use provgate::rulepack::RulePack;
use provgate::text::TextSanitizer;
use provgate::trust::{ProvenanceId, SessionId, SourceClass, SourceKind, SourcePriors};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProvgateStatus {
    Ok = 0,
    /// A required pointer was null or an argument was out of range.
    InvalidArgument = 1,
    /// An input string was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A configuration file or container failed to parse.
    ParseError = 3,
    /// Sanitization failed (the pipeline fails closed).
    SanitizeError = 4,
    /// Ledger storage failed.
    LedgerError = 5,
    /// Chain verification found a broken link.
    VerifyFailed = 6,
    /// An internal panic was caught at the boundary.
    Panic = 7,
}

/// Defense configuration selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProvgateMode {
    Full = 0,
    GatesOff = 1,
    SanitizersOff = 2,
    KeywordOnly = 3,
}

impl From<ProvgateMode> for DefenseMode {
    fn from(m: ProvgateMode) -> Self {
        match m {
            ProvgateMode::Full => DefenseMode::Full,
            ProvgateMode::GatesOff => DefenseMode::GatesOff,
            ProvgateMode::SanitizersOff => DefenseMode::SanitizersOff,
            ProvgateMode::KeywordOnly => DefenseMode::KeywordOnly,
        }
    }
}

/// Content source selector for ingress sanitization.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProvgateSource {
    User = 0,
    Tool = 1,
    ExternalDocument = 2,
    ImageMetadata = 3,
    ImageOverlayText = 4,
}

impl From<ProvgateSource> for SourceKind {
    fn from(s: ProvgateSource) -> Self {
        match s {
            ProvgateSource::User => SourceKind::User,
            ProvgateSource::Tool => SourceKind::Tool,
            ProvgateSource::ExternalDocument => SourceKind::ExternalDocument,
            ProvgateSource::ImageMetadata => SourceKind::ImageMetadata,
            ProvgateSource::ImageOverlayText => SourceKind::ImageOverlayText,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_last_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(message).unwrap_or_default();
    });
}

/// Opaque pipeline handle: rule pack, priors, thresholds, defense mode,
/// and an embedded ledger shared by every call on the handle.
pub struct ProvgateEngine {
    pack: Arc<RulePack>,
    priors: SourcePriors,
    thresholds: Thresholds,
    mode: DefenseMode,
    ledger: Ledger,
    next_envelope: std::sync::atomic::AtomicU64,
}

impl ProvgateEngine {
    fn alloc_envelope(&self) -> ProvenanceId {
        let n = self.next_envelope.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        ProvenanceId::new(format!("ffi-e{n}"))
    }
}

fn to_out_string(s: String, out: *mut *mut c_char) -> ProvgateStatus {
    match CString::new(s.replace('\0', " ")) {
        Ok(cstring) => {
            unsafe { *out = cstring.into_raw() };
            ProvgateStatus::Ok
        }
        Err(e) => {
            set_last_error(e.to_string());
            ProvgateStatus::Panic
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, ProvgateStatus> {
    if ptr.is_null() {
        set_last_error("null string argument");
        return Err(ProvgateStatus::InvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|e| {
        set_last_error(format!("invalid utf-8: {e}"));
        ProvgateStatus::InvalidUtf8
    })
}

fn guard(f: impl FnOnce() -> ProvgateStatus) -> ProvgateStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic");
            ProvgateStatus::Panic
        }
    }
}

/// Version string of the library. Static storage; do not free.
#[no_mangle]
pub extern "C" fn provgate_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message describing the most recent error on this thread. Valid until
/// the next failing call; do not free.
#[no_mangle]
pub extern "C" fn provgate_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string allocated by this library.
///
/// # Safety
/// `s` must be a pointer previously returned through an out-parameter of
/// this library, not yet freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn provgate_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Create an engine with the shipped rule pack, shipped source priors,
/// default thresholds, and the given defense mode. Returns null on
/// failure (see [`provgate_last_error`]).
#[no_mangle]
pub extern "C" fn provgate_engine_new(mode: ProvgateMode) -> *mut ProvgateEngine {
    match catch_unwind(|| ProvgateEngine {
        pack: Arc::new(RulePack::default()),
        priors: SourcePriors::default(),
        thresholds: Thresholds::default(),
        mode: mode.into(),
        ledger: Ledger::in_memory(),
        next_envelope: std::sync::atomic::AtomicU64::new(0),
    }) {
        Ok(engine) => Box::into_raw(Box::new(engine)),
        Err(_) => {
            set_last_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

/// Create an engine from explicit configuration: a rule pack JSON
/// document and a source-prior TOML document. Either pointer may be
/// null to use the shipped default.
///
/// # Safety
/// Non-null pointers must reference NUL-terminated UTF-8 strings.
#[no_mangle]
pub unsafe extern "C" fn provgate_engine_new_with_config(
    mode: ProvgateMode,
    rulepack_json: *const c_char,
    priors_toml: *const c_char,
) -> *mut ProvgateEngine {
    let build = || -> Result<ProvgateEngine, String> {
        let pack = if rulepack_json.is_null() {
            RulePack::default()
        } else {
            let text = CStr::from_ptr(rulepack_json)
                .to_str()
                .map_err(|e| format!("invalid utf-8: {e}"))?;
            RulePack::load(text).map_err(|e| e.to_string())?
        };
        let priors = if priors_toml.is_null() {
            SourcePriors::default()
        } else {
            let text = CStr::from_ptr(priors_toml)
                .to_str()
                .map_err(|e| format!("invalid utf-8: {e}"))?;
            SourcePriors::from_toml(text).map_err(|e| e.to_string())?
        };
        Ok(ProvgateEngine {
            pack: Arc::new(pack),
            priors,
            thresholds: Thresholds::default(),
            mode: mode.into(),
            ledger: Ledger::in_memory(),
            next_envelope: std::sync::atomic::AtomicU64::new(0),
        })
    };
    match catch_unwind(AssertUnwindSafe(build)) {
        Ok(Ok(engine)) => Box::into_raw(Box::new(engine)),
        Ok(Err(message)) => {
            set_last_error(message);
            std::ptr::null_mut()
        }
        Err(_) => {
            set_last_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

/// Destroy an engine.
///
/// # Safety
/// `engine` must be a pointer returned by one of the constructors, not
/// yet freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn provgate_engine_free(engine: *mut ProvgateEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Sanitize text under the given session and source class. On success,
/// `out_json` receives the sanitized spans (trusts, verdicts, actions,
/// provenance ids) as a JSON document; free it with
/// [`provgate_string_free`].
///
/// # Safety
/// `engine` must be a live engine pointer; `session`, `text` must be
/// NUL-terminated UTF-8; `out_json` must be a valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn provgate_sanitize_text(
    engine: *const ProvgateEngine,
    session: *const c_char,
    source: ProvgateSource,
    text: *const c_char,
    out_json: *mut *mut c_char,
) -> ProvgateStatus {
    if engine.is_null() || out_json.is_null() {
        set_last_error("null engine or output pointer");
        return ProvgateStatus::InvalidArgument;
    }
    let engine = &*engine;
    let (session, text) = match (cstr_arg(session), cstr_arg(text)) {
        (Ok(s), Ok(t)) => (s.to_owned(), t.to_owned()),
        (Err(e), _) | (_, Err(e)) => return e,
    };
    guard(move || {
        let sanitizer = TextSanitizer::new(
            engine.pack.clone(),
            engine.priors.clone(),
            engine.thresholds.clone(),
            engine.mode,
        );
        let source = match SourceClass::new(source.into()) {
            Ok(s) => s,
            Err(e) => {
                set_last_error(e.to_string());
                return ProvgateStatus::InvalidArgument;
            }
        };
        let envelope = engine.alloc_envelope();
        match sanitizer.sanitize(
            &engine.ledger,
            &SessionId::new(session),
            &envelope,
            &source,
            None,
            &text,
        ) {
            Ok(sanitized) => match serde_json::to_string(&sanitized) {
                Ok(json) => to_out_string(json, out_json),
                Err(e) => {
                    set_last_error(e.to_string());
                    ProvgateStatus::Panic
                }
            },
            Err(e) => {
                set_last_error(e.to_string());
                ProvgateStatus::SanitizeError
            }
        }
    })
}

/// Sanitize a binary image container (the documented `PVIM` layout).
/// On success `out_json` receives a report holding the patch grid, the
/// sanitized texts, and the redacted container hex-encoded under
/// `"container_hex"`.
///
/// # Safety
/// `engine` must be live; `container`/`container_len` must describe a
/// readable byte range; `session` must be NUL-terminated UTF-8;
/// `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn provgate_sanitize_image(
    engine: *const ProvgateEngine,
    session: *const c_char,
    source: ProvgateSource,
    container: *const u8,
    container_len: usize,
    out_json: *mut *mut c_char,
) -> ProvgateStatus {
    if engine.is_null() || container.is_null() || out_json.is_null() {
        set_last_error("null engine, container, or output pointer");
        return ProvgateStatus::InvalidArgument;
    }
    let engine = &*engine;
    let session = match cstr_arg(session) {
        Ok(s) => s.to_owned(),
        Err(e) => return e,
    };
    let bytes = std::slice::from_raw_parts(container, container_len).to_vec();
    guard(move || {
        let parsed = match ImageContainer::decode(&bytes) {
            Ok(c) => c,
            Err(e) => {
                set_last_error(e.to_string());
                return ProvgateStatus::ParseError;
            }
        };
        let sanitizer = VisualSanitizer::new(
            engine.pack.clone(),
            engine.priors.clone(),
            engine.thresholds.clone(),
            engine.mode,
        );
        let source = match SourceClass::new(source.into()) {
            Ok(s) => s,
            Err(e) => {
                set_last_error(e.to_string());
                return ProvgateStatus::InvalidArgument;
            }
        };
        let envelope = engine.alloc_envelope();
        let sanitized = match sanitizer.sanitize(
            &engine.ledger,
            &SessionId::new(session),
            &envelope,
            &source,
            None,
            &parsed,
        ) {
            Ok(s) => s,
            Err(e) => {
                set_last_error(e.to_string());
                return ProvgateStatus::SanitizeError;
            }
        };
        let report = serde_json::json!({
            "grid_rows": sanitized.grid_rows,
            "grid_cols": sanitized.grid_cols,
            "min_trust": sanitized.min_trust().map(|t| t.value()),
            "redacted_patches": sanitized.patches.iter().filter(|p| p.redacted).count(),
            "payload": sanitized.payload(),
            "container_hex": hex::encode(sanitized.container.encode()),
        });
        to_out_string(report.to_string(), out_json)
    })
}

/// Verify the hash chain of one session in the engine's ledger.
/// Returns `Ok` when the chain verifies, `VerifyFailed` when it does
/// not, and an error status on storage failure.
///
/// # Safety
/// `engine` must be live; `session` must be NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn provgate_verify_session(
    engine: *const ProvgateEngine,
    session: *const c_char,
) -> ProvgateStatus {
    if engine.is_null() {
        set_last_error("null engine");
        return ProvgateStatus::InvalidArgument;
    }
    let engine = &*engine;
    let session = match cstr_arg(session) {
        Ok(s) => s.to_owned(),
        Err(e) => return e,
    };
    guard(move || match engine.ledger.verify_chain(&SessionId::new(session)) {
        Ok(true) => ProvgateStatus::Ok,
        Ok(false) => {
            set_last_error("chain verification failed");
            ProvgateStatus::VerifyFailed
        }
        Err(e) => {
            set_last_error(e.to_string());
            ProvgateStatus::LedgerError
        }
    })
}

/// Export one session of the engine's ledger as JSON lines.
///
/// # Safety
/// `engine` must be live; `session` must be NUL-terminated UTF-8;
/// `out_jsonl` must be writable.
#[no_mangle]
pub unsafe extern "C" fn provgate_export_ledger(
    engine: *const ProvgateEngine,
    session: *const c_char,
    out_jsonl: *mut *mut c_char,
) -> ProvgateStatus {
    if engine.is_null() || out_jsonl.is_null() {
        set_last_error("null engine or output pointer");
        return ProvgateStatus::InvalidArgument;
    }
    let engine = &*engine;
    let session = match cstr_arg(session) {
        Ok(s) => s.to_owned(),
        Err(e) => return e,
    };
    guard(move || match engine.ledger.export_jsonl(&SessionId::new(session)) {
        Ok(jsonl) => to_out_string(jsonl, out_jsonl),
        Err(e) => {
            set_last_error(e.to_string());
            ProvgateStatus::LedgerError
        }
    })
}

/// Run a serialized corpus (the `gen-corpus` JSON schema) under a
/// defense mode and return the run report as JSON.
///
/// # Safety
/// `corpus_json` must be NUL-terminated UTF-8; `out_report_json` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn provgate_run_corpus(
    mode: ProvgateMode,
    corpus_json: *const c_char,
    out_report_json: *mut *mut c_char,
) -> ProvgateStatus {
    if out_report_json.is_null() {
        set_last_error("null output pointer");
        return ProvgateStatus::InvalidArgument;
    }
    let corpus_json = match cstr_arg(corpus_json) {
        Ok(s) => s.to_owned(),
        Err(e) => return e,
    };
    guard(move || {
        let corpus: provgate::harness::Corpus = match serde_json::from_str(&corpus_json) {
            Ok(c) => c,
            Err(e) => {
                set_last_error(e.to_string());
                return ProvgateStatus::ParseError;
            }
        };
        let config = provgate::harness::RunConfig::new(mode.into());
        let (report, _) = provgate::harness::run_corpus(&corpus, &config);
        let rendered =
            provgate::harness::emit_report(&report, provgate::harness::ReportFormat::Json);
        to_out_string(rendered, out_report_json)
    })
}
