#ifndef CORRECTION_DST_H
#define CORRECTION_DST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every `cdst_*` call.
 */
typedef enum CdstStatus {
  CDST_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  CDST_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  CDST_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad input: data, config, arguments.
   */
  CDST_STATUS_VALIDATION = 3,
  /**
   * Failure while running: backend, transport, output files.
   */
  CDST_STATUS_RUNTIME = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  CDST_STATUS_PANIC = 5,
} CdstStatus;

/**
 * Opaque dataset handle.
 */
typedef struct CdstDataset CdstDataset;

/**
 * Opaque schema handle.
 */
typedef struct CdstSchema CdstSchema;

/**
 * Opaque synonym-table handle.
 */
typedef struct CdstSynonyms CdstSynonyms;

/**
 * Scores of one pass.
 */
typedef struct CdstScores {
  uint64_t turns;
  double dst_jga;
  double dst_f1;
  double tlb_jga;
  double tlb_f1;
} CdstScores;

typedef struct CdstReport {
  struct CdstScores first;
  struct CdstScores final_pass;
} CdstReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string. Do not free.
 */
const char *cdst_version(void);

/**
 * Copy of the calling thread's last error message, or NULL if none.
 * Free with [`cdst_string_free`].
 */
char *cdst_last_error(void);

void cdst_clear_error(void);

/**
 * # Safety
 * `s` is NULL or a string returned by this library and not yet freed.
 */
void cdst_string_free(char *s);

/**
 * Load a schema JSON file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum CdstStatus cdst_schema_load(const char *path, struct CdstSchema **out);

/**
 * Parse a schema from JSON text.
 *
 * # Safety
 * `json` is a NUL-terminated string; `out` is writable.
 */
enum CdstStatus cdst_schema_from_json(const char *json, struct CdstSchema **out);

/**
 * # Safety
 * `schema` is NULL or a handle from this library, not yet freed.
 */
void cdst_schema_free(struct CdstSchema *schema);

/**
 * Number of slots across all domains.
 *
 * # Safety
 * `schema` is a live handle; `out` is writable.
 */
enum CdstStatus cdst_schema_slot_count(const struct CdstSchema *schema, size_t *out);

/**
 * # Safety
 * `schema` is a live handle; `slot` a NUL-terminated string; `out` writable.
 */
enum CdstStatus cdst_schema_has_slot(const struct CdstSchema *schema, const char *slot, bool *out);

/**
 * Load a dataset JSONL file, validated against `schema`.
 *
 * # Safety
 * `path` is a NUL-terminated string; `schema` a live handle; `out` writable.
 */
enum CdstStatus cdst_dataset_load(const char *path,
                                  const struct CdstSchema *schema,
                                  bool strict_consistency,
                                  struct CdstDataset **out);

/**
 * # Safety
 * `dataset` is NULL or a handle from this library, not yet freed.
 */
void cdst_dataset_free(struct CdstDataset *dataset);

/**
 * # Safety
 * `dataset` is a live handle; `out` is writable.
 */
enum CdstStatus cdst_dataset_dialogue_count(const struct CdstDataset *dataset, size_t *out);

/**
 * # Safety
 * `dataset` is a live handle; `out` is writable.
 */
enum CdstStatus cdst_dataset_turn_count(const struct CdstDataset *dataset, size_t *out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum CdstStatus cdst_synonyms_load(const char *path, struct CdstSynonyms **out);

/**
 * # Safety
 * `synonyms` is NULL or a handle from this library, not yet freed.
 */
void cdst_synonyms_free(struct CdstSynonyms *synonyms);

/**
 * Canonical form of a slot value (lowercase, single spaces).
 *
 * # Safety
 * `raw` is a NUL-terminated string; `out` is writable.
 */
enum CdstStatus cdst_normalize_value(const char *raw, char **out);

/**
 * Canonical form of a `domain-slot` name.
 *
 * # Safety
 * `raw` is a NUL-terminated string; `out` is writable.
 */
enum CdstStatus cdst_normalize_slot(const char *raw, char **out);

/**
 * Parse a completion into `{"tlb": {slot: value}, "diagnostics": [...]}`.
 *
 * # Safety
 * `completion` is a NUL-terminated string; `out_json` is writable.
 */
enum CdstStatus cdst_parse_tlb(const char *completion, bool strict, char **out_json);

/**
 * Render a turn belief given as a JSON object into `slot: value; ...`.
 *
 * # Safety
 * `tlb_json` is a NUL-terminated string; `out` is writable.
 */
enum CdstStatus cdst_render_tlb(const char *tlb_json, char **out);

/**
 * Apply a turn belief to a previous state; both and the result are JSON objects.
 *
 * # Safety
 * `prev_json` and `tlb_json` are NUL-terminated strings; `out_json` is writable.
 */
enum CdstStatus cdst_aggregate_state(const char *prev_json, const char *tlb_json, char **out_json);

/**
 * Score a predictions JSONL file. `synonyms` may be NULL.
 *
 * # Safety
 * `path` is a NUL-terminated string; `synonyms` NULL or a live handle; `out` writable.
 */
enum CdstStatus cdst_evaluate_file(const char *path,
                                   const struct CdstSynonyms *synonyms,
                                   struct CdstReport *out);

/**
 * 2 x params x (prompt + completion tokens), in TeraFLOPs.
 *
 * # Safety
 * `out_teraflops` is writable.
 */
enum CdstStatus cdst_estimate_teraflops(uint64_t params,
                                        uint64_t prompt_tokens,
                                        uint64_t completion_tokens,
                                        double *out_teraflops);

/**
 * Run every stage for a TOML config file and return the report as JSON.
 * Relative paths in the config resolve against its directory.
 *
 * # Safety
 * `config_path` is a NUL-terminated string; `out_report_json` is writable.
 */
enum CdstStatus cdst_run_experiment(const char *config_path, char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CORRECTION_DST_H */
