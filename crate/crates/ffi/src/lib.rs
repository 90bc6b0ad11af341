//! C ABI over the correction-dst library.
//!
//! Every function returns a [`CdstStatus`]. On failure the message is kept
//! per thread and can be fetched with [`cdst_last_error`]. Strings returned
//! through `out` parameters are owned by the caller and released with
//! [`cdst_string_free`]; handles are released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use correction_dst::backend::{estimate_flops, teraflops};
use correction_dst::config::load_config;
use correction_dst::dataset::{load_dataset, DatasetSplit, LoadOptions, SplitName};
use correction_dst::metrics::{evaluate_run, load_turn_records, EvalMode, MetricsReport, SynonymTable};
use correction_dst::prompt::{parse_tlb, render_tlb, ParseMode};
use correction_dst::report::{format_report, ReportFormat};
use correction_dst::run::{run_experiment, Session};
use correction_dst::schema::SchemaTable;
use correction_dst::state::{aggregate_state, normalize_slot, normalize_value, DialogueState, TurnBelief};
use correction_dst::{Error, ErrorClass};

/// Result code of every `cdst_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdstStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Bad input: data, config, arguments.
    Validation = 3,
    /// Failure while running: backend, transport, output files.
    Runtime = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Scores of one pass.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CdstScores {
    pub turns: u64,
    pub dst_jga: f64,
    pub dst_f1: f64,
    pub tlb_jga: f64,
    pub tlb_f1: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CdstReport {
    pub first: CdstScores,
    pub final_pass: CdstScores,
}

/// Opaque schema handle.
pub struct CdstSchema(SchemaTable);

/// Opaque dataset handle.
pub struct CdstDataset(DatasetSplit);

/// Opaque synonym-table handle.
pub struct CdstSynonyms(SynonymTable);

enum FfiError {
    Null(&'static str),
    Utf8(&'static str),
    Core(Error),
}

impl From<Error> for FfiError {
    fn from(e: Error) -> Self {
        FfiError::Core(e)
    }
}

impl From<serde_json::Error> for FfiError {
    fn from(e: serde_json::Error) -> Self {
        FfiError::Core(Error::Json(e))
    }
}

type FfiResult<T> = Result<T, FfiError>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> CdstStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdstStatus::Ok,
        Ok(Err(FfiError::Null(what))) => {
            set_last_error(format!("{what} is NULL"));
            CdstStatus::NullArgument
        }
        Ok(Err(FfiError::Utf8(what))) => {
            set_last_error(format!("{what} is not valid UTF-8"));
            CdstStatus::InvalidUtf8
        }
        Ok(Err(FfiError::Core(e))) => {
            set_last_error(e.to_string());
            match e.class() {
                ErrorClass::Validation => CdstStatus::Validation,
                ErrorClass::Runtime => CdstStatus::Runtime,
            }
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            CdstStatus::Panic
        }
    }
}

/// # Safety
/// `p` is NULL or a NUL-terminated string valid for the duration of the call.
unsafe fn arg_str<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(FfiError::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| FfiError::Utf8(what))
}

unsafe fn arg_path(p: *const c_char, what: &'static str) -> FfiResult<PathBuf> {
    arg_str(p, what).map(PathBuf::from)
}

unsafe fn arg_ref<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(FfiError::Null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &'static str) -> FfiResult<()> {
    if out.is_null() {
        return Err(FfiError::Null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> FfiResult<()> {
    let c = CString::new(s).map_err(|_| Error::InvalidArgument("string contains NUL".into()))?;
    if out.is_null() {
        return Err(FfiError::Null("out"));
    }
    out.write(c.into_raw());
    Ok(())
}

unsafe fn put_handle<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(FfiError::Null("out"));
    }
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn scores(r: &MetricsReport) -> CdstScores {
    CdstScores {
        turns: r.turns as u64,
        dst_jga: r.scores.dst_jga,
        dst_f1: r.scores.dst_f1,
        tlb_jga: r.scores.tlb_jga,
        tlb_f1: r.scores.tlb_f1,
    }
}

/// Library version as a static NUL-terminated string. Do not free.
#[no_mangle]
pub extern "C" fn cdst_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the calling thread's last error message, or NULL if none.
/// Free with [`cdst_string_free`].
#[no_mangle]
pub extern "C" fn cdst_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |c| c.clone().into_raw()))
}

#[no_mangle]
pub extern "C" fn cdst_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// # Safety
/// `s` is NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdst_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a schema JSON file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_schema_load(path: *const c_char, out: *mut *mut CdstSchema) -> CdstStatus {
    guard(|| {
        let path = arg_path(path, "path")?;
        put_handle(out, CdstSchema(SchemaTable::load(&path)?))
    })
}

/// Parse a schema from JSON text.
///
/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_schema_from_json(json: *const c_char, out: *mut *mut CdstSchema) -> CdstStatus {
    guard(|| {
        let text = arg_str(json, "json")?;
        put_handle(out, CdstSchema(SchemaTable::from_json_str(text)?))
    })
}

/// # Safety
/// `schema` is NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdst_schema_free(schema: *mut CdstSchema) {
    free_handle(schema)
}

/// Number of slots across all domains.
///
/// # Safety
/// `schema` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_schema_slot_count(schema: *const CdstSchema, out: *mut usize) -> CdstStatus {
    guard(|| {
        let s = arg_ref(schema, "schema")?;
        put(out, s.0.all_slots().count(), "out")
    })
}

/// # Safety
/// `schema` is a live handle; `slot` a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_schema_has_slot(
    schema: *const CdstSchema,
    slot: *const c_char,
    out: *mut bool,
) -> CdstStatus {
    guard(|| {
        let s = arg_ref(schema, "schema")?;
        let slot = arg_str(slot, "slot")?;
        let found = normalize_slot(slot).map(|n| s.0.has_slot(&n)).unwrap_or(false);
        put(out, found, "out")
    })
}

/// Load a dataset JSONL file, validated against `schema`.
///
/// # Safety
/// `path` is a NUL-terminated string; `schema` a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_dataset_load(
    path: *const c_char,
    schema: *const CdstSchema,
    strict_consistency: bool,
    out: *mut *mut CdstDataset,
) -> CdstStatus {
    guard(|| {
        let path = arg_path(path, "path")?;
        let schema = arg_ref(schema, "schema")?;
        let opts = LoadOptions {
            name: SplitName::Test,
            strict_consistency,
        };
        put_handle(out, CdstDataset(load_dataset(&path, &schema.0, &opts)?.split))
    })
}

/// # Safety
/// `dataset` is NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdst_dataset_free(dataset: *mut CdstDataset) {
    free_handle(dataset)
}

/// # Safety
/// `dataset` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_dataset_dialogue_count(dataset: *const CdstDataset, out: *mut usize) -> CdstStatus {
    guard(|| put(out, arg_ref(dataset, "dataset")?.0.dialogues.len(), "out"))
}

/// # Safety
/// `dataset` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_dataset_turn_count(dataset: *const CdstDataset, out: *mut usize) -> CdstStatus {
    guard(|| put(out, arg_ref(dataset, "dataset")?.0.turn_count(), "out"))
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_synonyms_load(path: *const c_char, out: *mut *mut CdstSynonyms) -> CdstStatus {
    guard(|| {
        let path = arg_path(path, "path")?;
        put_handle(out, CdstSynonyms(SynonymTable::load(&path)?))
    })
}

/// # Safety
/// `synonyms` is NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdst_synonyms_free(synonyms: *mut CdstSynonyms) {
    free_handle(synonyms)
}

/// Canonical form of a slot value (lowercase, single spaces).
///
/// # Safety
/// `raw` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_normalize_value(raw: *const c_char, out: *mut *mut c_char) -> CdstStatus {
    guard(|| put_string(out, normalize_value(arg_str(raw, "raw")?)?))
}

/// Canonical form of a `domain-slot` name.
///
/// # Safety
/// `raw` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_normalize_slot(raw: *const c_char, out: *mut *mut c_char) -> CdstStatus {
    guard(|| put_string(out, normalize_slot(arg_str(raw, "raw")?)?))
}

/// Parse a completion into `{"tlb": {slot: value}, "diagnostics": [...]}`.
///
/// # Safety
/// `completion` is a NUL-terminated string; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_parse_tlb(
    completion: *const c_char,
    strict: bool,
    out_json: *mut *mut c_char,
) -> CdstStatus {
    guard(|| {
        let mode = if strict { ParseMode::Strict } else { ParseMode::Lenient };
        let parsed = parse_tlb(arg_str(completion, "completion")?, mode)?;
        let v = serde_json::json!({ "tlb": parsed.tlb, "diagnostics": parsed.diagnostics });
        put_string(out_json, v.to_string())
    })
}

/// Render a turn belief given as a JSON object into `slot: value; ...`.
///
/// # Safety
/// `tlb_json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_render_tlb(tlb_json: *const c_char, out: *mut *mut c_char) -> CdstStatus {
    guard(|| {
        let tlb: TurnBelief = serde_json::from_str(arg_str(tlb_json, "tlb_json")?)?;
        put_string(out, render_tlb(&tlb))
    })
}

/// Apply a turn belief to a previous state; both and the result are JSON objects.
///
/// # Safety
/// `prev_json` and `tlb_json` are NUL-terminated strings; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_aggregate_state(
    prev_json: *const c_char,
    tlb_json: *const c_char,
    out_json: *mut *mut c_char,
) -> CdstStatus {
    guard(|| {
        let prev: DialogueState = serde_json::from_str(arg_str(prev_json, "prev_json")?)?;
        let tlb: TurnBelief = serde_json::from_str(arg_str(tlb_json, "tlb_json")?)?;
        put_string(out_json, serde_json::to_string(&aggregate_state(&prev, &tlb))?)
    })
}

/// Score a predictions JSONL file. `synonyms` may be NULL.
///
/// # Safety
/// `path` is a NUL-terminated string; `synonyms` NULL or a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_evaluate_file(
    path: *const c_char,
    synonyms: *const CdstSynonyms,
    out: *mut CdstReport,
) -> CdstStatus {
    guard(|| {
        let path = arg_path(path, "path")?;
        let empty = SynonymTable::new();
        let syn = synonyms.as_ref().map_or(&empty, |s| &s.0);
        let records = load_turn_records(&path)?;
        let report = CdstReport {
            first: scores(&evaluate_run(&records, syn, EvalMode::First)?),
            final_pass: scores(&evaluate_run(&records, syn, EvalMode::Final)?),
        };
        put(out, report, "out")
    })
}

/// 2 x params x (prompt + completion tokens), in TeraFLOPs.
///
/// # Safety
/// `out_teraflops` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_estimate_teraflops(
    params: u64,
    prompt_tokens: u64,
    completion_tokens: u64,
    out_teraflops: *mut f64,
) -> CdstStatus {
    guard(|| {
        let tf = teraflops(estimate_flops(params, prompt_tokens, completion_tokens));
        put(out_teraflops, tf, "out_teraflops")
    })
}

/// Run every stage for a TOML config file and return the report as JSON.
/// Relative paths in the config resolve against its directory.
///
/// # Safety
/// `config_path` is a NUL-terminated string; `out_report_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdst_run_experiment(
    config_path: *const c_char,
    out_report_json: *mut *mut c_char,
) -> CdstStatus {
    guard(|| {
        let path = arg_path(config_path, "config_path")?;
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        let cfg = load_config(Some(Path::new(&path)), &[], &[], &cwd)?;
        let outcome = run_experiment(&Session::new(cfg))?;
        put_string(out_report_json, format_report(&outcome.report, ReportFormat::Json)?)
    })
}
