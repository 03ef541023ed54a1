#ifndef CHOPT_H
#define CHOPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum ChoptStatus {
  CHOPT_STATUS_OK = 0,
  // A required pointer argument was null.
  CHOPT_STATUS_NULL_ARGUMENT = 1,
  // A configuration or argument failed validation.
  CHOPT_STATUS_VALIDATION = 2,
  CHOPT_STATUS_NOT_FOUND = 3,
  CHOPT_STATUS_IO = 4,
  // An input string was not valid UTF-8.
  CHOPT_STATUS_UTF8 = 5,
  // An unexpected failure, including a caught panic.
  CHOPT_STATUS_INTERNAL = 6,
} ChoptStatus;

// Opaque engine handle.
typedef struct ChoptEngine ChoptEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Create an engine from a JSON document
// `{"cluster": {"capacity": 100, ...}, "trace": [[0, 40], ...], "data_dir": "..."}`.
// A null `spec_json` means a 100-GPU cluster with no other users.
//
// # Safety
// `spec_json` must be null or a nul-terminated string; `out` must be valid for one write.
enum ChoptStatus chopt_engine_new(const char *spec_json, struct ChoptEngine **out);

// Release an engine. Null is ignored.
//
// # Safety
// `engine` must be null or a handle from `chopt_engine_new` not yet freed.
void chopt_engine_free(struct ChoptEngine *engine);

// Validate and enqueue a session; writes its numeric id (`s0001` is 1).
//
// # Safety
// `engine` must be a live handle, `config_json` a nul-terminated string, `out_session` valid for one write.
enum ChoptStatus chopt_engine_submit(struct ChoptEngine *engine,
                                     const char *config_json,
                                     uint32_t *out_session);

// Advance one tick; writes the new simulated time when `out_now` is not null.
//
// # Safety
// `engine` must be a live handle; `out_now` null or valid for one write.
enum ChoptStatus chopt_engine_tick(struct ChoptEngine *engine, uint64_t *out_now);

// Tick until no session is queued or running, or `max_ticks` elapse.
// Writes the number of ticks taken when `out_ticks` is not null.
//
// # Safety
// `engine` must be a live handle; `out_ticks` null or valid for one write.
enum ChoptStatus chopt_engine_run_until_idle(struct ChoptEngine *engine,
                                             uint64_t max_ticks,
                                             uint64_t *out_ticks);

// Stop a session. Stopping a terminated session is a no-op.
//
// # Safety
// `engine` must be a live handle.
enum ChoptStatus chopt_engine_stop(struct ChoptEngine *engine, uint32_t session);

// Snapshot of a session as JSON.
//
// # Safety
// `engine` must be a live handle; `out` valid for one write.
enum ChoptStatus chopt_engine_session_json(struct ChoptEngine *engine,
                                           uint32_t session,
                                           char **out);

// Trial table of a session in `csv` or `jsonl`.
//
// # Safety
// `engine` must be a live handle, `format` a nul-terminated string, `out` valid for one write.
enum ChoptStatus chopt_engine_export(struct ChoptEngine *engine,
                                     uint32_t session,
                                     const char *format,
                                     char **out);

// Fraction of cluster capacity in use after the last tick.
//
// # Safety
// `engine` must be a live handle; `out` valid for one write.
enum ChoptStatus chopt_engine_utilization(struct ChoptEngine *engine, double *out);

// Check a configuration document. On a validation failure the offending
// field is written to `out_field` (when not null) and must be freed.
//
// # Safety
// `config_json` must be a nul-terminated string; `out_field` null or valid for one write.
enum ChoptStatus chopt_config_validate(const char *config_json, char **out_field);

// Hyperband brackets for resource limit `r` and reduction factor `eta`, as
// JSON `[{"s": 4, "rounds": [{"n": 81, "r": 1}, ...]}, ...]`.
//
// # Safety
// `out` must be valid for one write.
enum ChoptStatus chopt_hyperband_schedule_json(uint64_t r, uint64_t eta, char **out);

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread; do not free it.
const char *chopt_last_error(void);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void chopt_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHOPT_H */
