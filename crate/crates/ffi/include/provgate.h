#ifndef PROVGATE_H
#define PROVGATE_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Defense configuration selector.
typedef enum ProvgateMode {
  PROVGATE_MODE_FULL = 0,
  PROVGATE_MODE_GATES_OFF = 1,
  PROVGATE_MODE_SANITIZERS_OFF = 2,
  PROVGATE_MODE_KEYWORD_ONLY = 3,
} ProvgateMode;

// Status codes returned by every fallible entry point.
typedef enum ProvgateStatus {
  PROVGATE_STATUS_OK = 0,
  // A required pointer was null or an argument was out of range.
  PROVGATE_STATUS_INVALID_ARGUMENT = 1,
  // An input string was not valid UTF-8.
  PROVGATE_STATUS_INVALID_UTF8 = 2,
  // A configuration file or container failed to parse.
  PROVGATE_STATUS_PARSE_ERROR = 3,
  // Sanitization failed (the pipeline fails closed).
  PROVGATE_STATUS_SANITIZE_ERROR = 4,
  // Ledger storage failed.
  PROVGATE_STATUS_LEDGER_ERROR = 5,
  // Chain verification found a broken link.
  PROVGATE_STATUS_VERIFY_FAILED = 6,
  // An internal panic was caught at the boundary.
  PROVGATE_STATUS_PANIC = 7,
} ProvgateStatus;

// Content source selector for ingress sanitization.
typedef enum ProvgateSource {
  PROVGATE_SOURCE_USER = 0,
  PROVGATE_SOURCE_TOOL = 1,
  PROVGATE_SOURCE_EXTERNAL_DOCUMENT = 2,
  PROVGATE_SOURCE_IMAGE_METADATA = 3,
  PROVGATE_SOURCE_IMAGE_OVERLAY_TEXT = 4,
} ProvgateSource;

// Opaque pipeline handle: rule pack, priors, thresholds, defense mode,
// and an embedded ledger shared by every call on the handle.
typedef struct ProvgateEngine ProvgateEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version string of the library. Static storage; do not free.
const char *provgate_version(void);

// Message describing the most recent error on this thread. Valid until
// the next failing call; do not free.
const char *provgate_last_error(void);

// Release a string allocated by this library.
//
// # Safety
// `s` must be a pointer previously returned through an out-parameter of
// this library, not yet freed. Null is ignored.
void provgate_string_free(char *s);

// Create an engine with the shipped rule pack, shipped source priors,
// default thresholds, and the given defense mode. Returns null on
// failure (see [`provgate_last_error`]).
struct ProvgateEngine *provgate_engine_new(enum ProvgateMode mode);

// Create an engine from explicit configuration: a rule pack JSON
// document and a source-prior TOML document. Either pointer may be
// null to use the shipped default.
//
// # Safety
// Non-null pointers must reference NUL-terminated UTF-8 strings.
struct ProvgateEngine *provgate_engine_new_with_config(enum ProvgateMode mode,
                                                       const char *rulepack_json,
                                                       const char *priors_toml);

// Destroy an engine.
//
// # Safety
// `engine` must be a pointer returned by one of the constructors, not
// yet freed. Null is ignored.
void provgate_engine_free(struct ProvgateEngine *engine);

// Sanitize text under the given session and source class. On success,
// `out_json` receives the sanitized spans (trusts, verdicts, actions,
// provenance ids) as a JSON document; free it with
// [`provgate_string_free`].
//
// # Safety
// `engine` must be a live engine pointer; `session`, `text` must be
// NUL-terminated UTF-8; `out_json` must be a valid writable pointer.
enum ProvgateStatus provgate_sanitize_text(const struct ProvgateEngine *engine,
                                           const char *session,
                                           enum ProvgateSource source,
                                           const char *text,
                                           char **out_json);

// Sanitize a binary image container (the documented `PVIM` layout).
// On success `out_json` receives a report holding the patch grid, the
// sanitized texts, and the redacted container hex-encoded under
// `"container_hex"`.
//
// # Safety
// `engine` must be live; `container`/`container_len` must describe a
// readable byte range; `session` must be NUL-terminated UTF-8;
// `out_json` must be writable.
enum ProvgateStatus provgate_sanitize_image(const struct ProvgateEngine *engine,
                                            const char *session,
                                            enum ProvgateSource source,
                                            const uint8_t *container,
                                            size_t container_len,
                                            char **out_json);

// Verify the hash chain of one session in the engine's ledger.
// Returns `Ok` when the chain verifies, `VerifyFailed` when it does
// not, and an error status on storage failure.
//
// # Safety
// `engine` must be live; `session` must be NUL-terminated UTF-8.
enum ProvgateStatus provgate_verify_session(const struct ProvgateEngine *engine,
                                            const char *session);

// Export one session of the engine's ledger as JSON lines.
//
// # Safety
// `engine` must be live; `session` must be NUL-terminated UTF-8;
// `out_jsonl` must be writable.
enum ProvgateStatus provgate_export_ledger(const struct ProvgateEngine *engine,
                                           const char *session,
                                           char **out_jsonl);

// Run a serialized corpus (the `gen-corpus` JSON schema) under a
// defense mode and return the run report as JSON.
//
// # Safety
// `corpus_json` must be NUL-terminated UTF-8; `out_report_json` must be
// writable.
enum ProvgateStatus provgate_run_corpus(enum ProvgateMode mode,
                                        const char *corpus_json,
                                        char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROVGATE_H */
