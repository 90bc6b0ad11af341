use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use correction_dst_ffi::*;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn cpath(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

/// Takes ownership of a library string.
unsafe fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    cdst_string_free(s);
    out
}

fn last_error() -> Option<String> {
    let p = cdst_last_error();
    if p.is_null() {
        None
    } else {
        Some(unsafe { take(p) })
    }
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(cdst_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    cdst_clear_error();
    assert!(last_error().is_none());
    let mut out: *mut CdstSchema = ptr::null_mut();
    let st = unsafe { cdst_schema_load(ptr::null(), &mut out) };
    assert_eq!(st, CdstStatus::NullArgument);
    assert!(out.is_null());
    assert!(last_error().unwrap().contains("path"));

    let p = cpath(&fixtures().join("schema.json"));
    let st = unsafe { cdst_schema_load(p.as_ptr(), ptr::null_mut()) };
    assert_eq!(st, CdstStatus::NullArgument);

    let mut n = 0usize;
    let st = unsafe { cdst_schema_slot_count(ptr::null(), &mut n) };
    assert_eq!(st, CdstStatus::NullArgument);
    assert!(last_error().unwrap().contains("schema"));

    unsafe {
        cdst_schema_free(ptr::null_mut());
        cdst_dataset_free(ptr::null_mut());
        cdst_synonyms_free(ptr::null_mut());
        cdst_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_utf8_is_reported() {
    let bad = [0xffu8, 0xfe, 0];
    let mut out: *mut c_char = ptr::null_mut();
    let st = unsafe { cdst_normalize_value(bad.as_ptr().cast(), &mut out) };
    assert_eq!(st, CdstStatus::InvalidUtf8);
    assert!(out.is_null());
}

#[test]
fn error_classes_map_to_status() {
    let mut schema: *mut CdstSchema = ptr::null_mut();
    let missing = c("/nonexistent/schema.json");
    assert_eq!(unsafe { cdst_schema_load(missing.as_ptr(), &mut schema) }, CdstStatus::Validation);
    assert!(last_error().unwrap().contains("/nonexistent/schema.json"));

    let garbage = c("{not json");
    assert_eq!(unsafe { cdst_schema_from_json(garbage.as_ptr(), &mut schema) }, CdstStatus::Validation);
    assert!(schema.is_null());

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.0);
    let text = std::fs::read_to_string(&cfg).unwrap().replace("fraction = 0.05", "fraction = 1.5");
    std::fs::write(&cfg, text).unwrap();
    let mut json: *mut c_char = ptr::null_mut();
    let p = cpath(&cfg);
    assert_eq!(unsafe { cdst_run_experiment(p.as_ptr(), &mut json) }, CdstStatus::Validation);
    let msg = last_error().unwrap();
    assert!(msg.contains("fraction"), "{msg}");
}

#[test]
fn last_error_is_per_thread() {
    let mut n = 0usize;
    assert_eq!(unsafe { cdst_schema_slot_count(ptr::null(), &mut n) }, CdstStatus::NullArgument);
    let other = std::thread::spawn(last_error).join().unwrap();
    assert!(other.is_none());
    assert!(last_error().is_some());
}

#[test]
fn schema_and_dataset_handles() {
    unsafe {
        let mut schema: *mut CdstSchema = ptr::null_mut();
        let p = cpath(&fixtures().join("schema.json"));
        assert_eq!(cdst_schema_load(p.as_ptr(), &mut schema), CdstStatus::Ok);
        assert!(!schema.is_null());

        let mut n = 0usize;
        assert_eq!(cdst_schema_slot_count(schema, &mut n), CdstStatus::Ok);
        assert!(n > 10);

        let mut found = false;
        let slot = c("Hotel-Area");
        assert_eq!(cdst_schema_has_slot(schema, slot.as_ptr(), &mut found), CdstStatus::Ok);
        assert!(found);
        let slot = c("hotel-colour");
        assert_eq!(cdst_schema_has_slot(schema, slot.as_ptr(), &mut found), CdstStatus::Ok);
        assert!(!found);

        let mut ds: *mut CdstDataset = ptr::null_mut();
        let p = cpath(&fixtures().join("test.jsonl"));
        assert_eq!(cdst_dataset_load(p.as_ptr(), schema, true, &mut ds), CdstStatus::Ok);
        let (mut dialogues, mut turns) = (0usize, 0usize);
        assert_eq!(cdst_dataset_dialogue_count(ds, &mut dialogues), CdstStatus::Ok);
        assert_eq!(cdst_dataset_turn_count(ds, &mut turns), CdstStatus::Ok);
        assert_eq!(dialogues, 24);
        assert!(turns >= 3 * dialogues);

        cdst_dataset_free(ds);
        cdst_schema_free(schema);
    }
}

#[test]
fn schema_from_json_text() {
    let text = std::fs::read_to_string(fixtures().join("schema.json")).unwrap();
    let text = c(&text);
    let mut schema: *mut CdstSchema = ptr::null_mut();
    unsafe {
        assert_eq!(cdst_schema_from_json(text.as_ptr(), &mut schema), CdstStatus::Ok);
        let mut n = 0usize;
        cdst_schema_slot_count(schema, &mut n);
        assert!(n > 0);
        cdst_schema_free(schema);
    }
}

#[test]
fn normalization() {
    unsafe {
        let mut out: *mut c_char = ptr::null_mut();
        let raw = c("  The   CENTRE ");
        assert_eq!(cdst_normalize_value(raw.as_ptr(), &mut out), CdstStatus::Ok);
        assert_eq!(take(out), "the centre");

        let raw = c(" Hotel-Price Range ");
        assert_eq!(cdst_normalize_slot(raw.as_ptr(), &mut out), CdstStatus::Ok);
        let slot = take(out);
        assert!(slot.starts_with("hotel-"), "{slot}");
        assert_eq!(slot, slot.to_lowercase());
    }
}

#[test]
fn parse_render_aggregate() {
    unsafe {
        let mut out: *mut c_char = ptr::null_mut();
        let completion = c("[TLB] hotel-area: north; hotel-stars: [DELETE]; junk\n[USER] more");
        assert_eq!(cdst_parse_tlb(completion.as_ptr(), false, &mut out), CdstStatus::Ok);
        let parsed: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(parsed["tlb"]["hotel-area"], "north");
        assert_eq!(parsed["tlb"]["hotel-stars"], "[DELETE]");
        assert_eq!(parsed["diagnostics"].as_array().unwrap().len(), 1);

        assert_eq!(cdst_parse_tlb(completion.as_ptr(), true, &mut out), CdstStatus::Validation);
        assert!(last_error().is_some());

        let tlb = parsed["tlb"].to_string();
        let tlb_c = c(&tlb);
        assert_eq!(cdst_render_tlb(tlb_c.as_ptr(), &mut out), CdstStatus::Ok);
        let rendered = take(out);
        assert_eq!(rendered, "hotel-area: north; hotel-stars: [DELETE]");

        let again = c(&rendered);
        assert_eq!(cdst_parse_tlb(again.as_ptr(), true, &mut out), CdstStatus::Ok);
        let reparsed: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(reparsed["tlb"], parsed["tlb"]);

        let prev = c(r#"{"hotel-stars": "4", "hotel-name": "acorn"}"#);
        assert_eq!(cdst_aggregate_state(prev.as_ptr(), tlb_c.as_ptr(), &mut out), CdstStatus::Ok);
        let state: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(state, serde_json::json!({"hotel-area": "north", "hotel-name": "acorn"}));

        let empty = c("{}");
        assert_eq!(cdst_render_tlb(empty.as_ptr(), &mut out), CdstStatus::Ok);
        assert_eq!(take(out), "NONE");
    }
}

#[test]
fn teraflops_estimate() {
    let mut tf = 0.0;
    assert_eq!(unsafe { cdst_estimate_teraflops(8_000_000_000, 1000, 12, &mut tf) }, CdstStatus::Ok);
    let expected = 2.0 * 8e9 * 1012.0 / 1e12;
    assert!((tf - expected).abs() <= 1e-12 * expected);
    assert_eq!(unsafe { cdst_estimate_teraflops(1, 1, 1, ptr::null_mut()) }, CdstStatus::NullArgument);
}

fn write_config(dir: &Path, inference_p: f64) -> PathBuf {
    let f = fixtures();
    let cfg = format!(
        r#"train = "{train}"
eval = "{eval}"
schema = "{schema}"
synonyms = "{syn}"
style = "mwoz"
fraction = 0.05
max_concurrency = 2
output_dir = "{out}"

[seeds]
split = 11
demos = 12
noise = 13

[backends.inference]
kind = "oracle-noise"
p = {inference_p}

[backends.correction]
kind = "oracle-noise"
p = 0.0
"#,
        train = f.join("train.jsonl").display(),
        eval = f.join("test.jsonl").display(),
        schema = f.join("schema.json").display(),
        syn = f.join("synonyms.json").display(),
        out = dir.join("out").display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn run_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cpath(&write_config(dir.path(), 0.4));
    unsafe {
        let mut json: *mut c_char = ptr::null_mut();
        assert_eq!(cdst_run_experiment(cfg.as_ptr(), &mut json), CdstStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
        let first = report["first"]["dst_jga"].as_f64().unwrap();
        let fin = report["final"]["dst_jga"].as_f64().unwrap();
        assert!(first < 1.0);
        assert_eq!(fin, 1.0);

        let mut syn: *mut CdstSynonyms = ptr::null_mut();
        let sp = cpath(&fixtures().join("synonyms.json"));
        assert_eq!(cdst_synonyms_load(sp.as_ptr(), &mut syn), CdstStatus::Ok);

        let preds = cpath(&dir.path().join("out/predictions.jsonl"));
        let mut scores = CdstReport::default();
        assert_eq!(cdst_evaluate_file(preds.as_ptr(), syn, &mut scores), CdstStatus::Ok);
        assert_eq!(scores.first.dst_jga, first);
        assert_eq!(scores.final_pass.dst_jga, fin);
        assert!(scores.first.turns > 0);
        assert_eq!(scores.first.turns, scores.final_pass.turns);

        let mut plain = CdstReport::default();
        assert_eq!(cdst_evaluate_file(preds.as_ptr(), ptr::null(), &mut plain), CdstStatus::Ok);
        assert_eq!(plain.final_pass.turns, scores.final_pass.turns);

        cdst_synonyms_free(syn);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/correction_dst.h")).unwrap();
    for name in [
        "cdst_version",
        "cdst_last_error",
        "cdst_clear_error",
        "cdst_string_free",
        "cdst_schema_load",
        "cdst_schema_from_json",
        "cdst_schema_free",
        "cdst_schema_slot_count",
        "cdst_schema_has_slot",
        "cdst_dataset_load",
        "cdst_dataset_free",
        "cdst_dataset_dialogue_count",
        "cdst_dataset_turn_count",
        "cdst_synonyms_load",
        "cdst_synonyms_free",
        "cdst_normalize_value",
        "cdst_normalize_slot",
        "cdst_parse_tlb",
        "cdst_render_tlb",
        "cdst_aggregate_state",
        "cdst_evaluate_file",
        "cdst_estimate_teraflops",
        "cdst_run_experiment",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["typedef struct CdstSchema CdstSchema;", "typedef enum CdstStatus", "typedef struct CdstReport"] {
        assert!(header.contains(ty), "{ty} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"correction_dst.h\"\nint main(void) { CdstStatus s = CDST_STATUS_OK; (void)s; return 0; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|cc| std::process::Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
