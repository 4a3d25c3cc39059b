/* Generated by cbindgen from the mapek-ffi crate. Do not edit. */

#ifndef MAPEK_H
#define MAPEK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum MapekStatus {
  MAPEK_STATUS_OK = 0,
  MAPEK_STATUS_NULL_ARGUMENT = 1,
  MAPEK_STATUS_INVALID_UTF8 = 2,
  MAPEK_STATUS_IO = 3,
  MAPEK_STATUS_CONFIG = 4,
  MAPEK_STATUS_SCENARIO = 5,
  MAPEK_STATUS_JOURNAL = 6,
  MAPEK_STATUS_NOT_FOUND = 7,
  MAPEK_STATUS_CONFLICT = 8,
  MAPEK_STATUS_HALTED = 9,
  MAPEK_STATUS_INVALID_ARGUMENT = 10,
  MAPEK_STATUS_PANIC = 11,
} MapekStatus;

// Opaque controller handle.
typedef struct MapekController MapekController;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Creates a controller from a config file and a scenario file.
//
// `journal_path` may be null to use `kb.journal_path` from the config.
// On success `*out` receives a handle to release with `mapek_controller_free`.
//
// # Safety
// String arguments must be null or valid NUL-terminated strings; `out` must
// be a valid pointer.
enum MapekStatus mapek_controller_new(const char *config_path,
                                      const char *scenario_path,
                                      uint64_t seed,
                                      const char *journal_path,
                                      struct MapekController **out);

// Releases a controller. Null is ignored.
//
// # Safety
// `handle` must be null or a pointer from `mapek_controller_new` not yet freed.
void mapek_controller_free(struct MapekController *handle);

// Runs `ticks` cycles (one per tick).
//
// # Safety
// `handle` must be a live controller handle.
enum MapekStatus mapek_controller_run(struct MapekController *handle, uint64_t ticks);

// Runs exactly one cycle.
//
// # Safety
// `handle` must be a live controller handle.
enum MapekStatus mapek_controller_run_cycle(struct MapekController *handle);

// Writes the current simulator tick to `*out`.
//
// # Safety
// `handle` must be a live controller handle and `out` a valid pointer.
enum MapekStatus mapek_controller_tick(const struct MapekController *handle, uint64_t *out);

// Pending approval requests as a JSON array.
//
// # Safety
// `handle` must be a live controller handle and `out` a valid pointer.
enum MapekStatus mapek_controller_pending_approvals(const struct MapekController *handle,
                                                    char **out);

// Approves (`approve` true) or rejects a pending request. On success `*out`
// receives the execution result as JSON; `out` may be null to discard it.
//
// # Safety
// `handle` must be a live controller handle; strings must be valid.
enum MapekStatus mapek_controller_resolve_approval(struct MapekController *handle,
                                                   const char *request_id,
                                                   bool approve,
                                                   const char *decider,
                                                   char **out);

// Hex digest of the knowledge-base state.
//
// # Safety
// `handle` must be a live controller handle and `out` a valid pointer.
enum MapekStatus mapek_controller_digest(const struct MapekController *handle, char **out);

// Rebuilds state from a journal file and returns its digest.
//
// # Safety
// `journal_path` must be a valid string and `out` a valid pointer.
enum MapekStatus mapek_replay_digest(const char *journal_path, char **out);

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *mapek_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a string returned through an `out` parameter, not yet freed.
void mapek_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAPEK_H */
