/* SPDX-License-Identifier: Apache-2.0 */
/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SANDBOX_FFI_H
#define SANDBOX_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum SbStatus {
  SB_STATUS_OK = 0,
  SB_STATUS_NULL_POINTER = 1,
  SB_STATUS_INVALID_UTF8 = 2,
  SB_STATUS_INVALID_ARGUMENT = 3,
  SB_STATUS_BUFFER_TOO_SMALL = 4,
  SB_STATUS_CONFIG_ERROR = 10,
  SB_STATUS_NO_FEASIBLE_CANDIDATE = 11,
  SB_STATUS_UNKNOWN_CONFIG = 12,
  SB_STATUS_ILLEGAL_TRANSITION = 20,
  SB_STATUS_LAUNCH_FAILED = 21,
  SB_STATUS_WIPE_INCOMPLETE = 22,
  SB_STATUS_ANALYTICS_ERROR = 30,
  SB_STATUS_UNSTABLE = 31,
  SB_STATUS_PANIC = 99,
} SbStatus;

typedef enum SbState {
  SB_STATE_LOADER = 0,
  SB_STATE_VM_RUNNING = 1,
  SB_STATE_TERMINATED = 2,
} SbState;

typedef enum SbRoute {
  SB_ROUTE_LOADER = 0,
  SB_ROUTE_VNC = 1,
  SB_ROUTE_GONE = 2,
} SbRoute;

/**
 * Why a session is being ended by the caller.
 */
typedef enum SbCause {
  SB_CAUSE_STOPPED = 0,
  SB_CAUSE_LOADER_TIMEOUT = 1,
  SB_CAUSE_LAUNCH_FAILED = 2,
  SB_CAUSE_CONFIG_ERROR = 3,
  SB_CAUSE_INTERNAL = 4,
} SbCause;

/**
 * Catalog of launch profiles with its performance table.
 */
typedef struct SbCatalog SbCatalog;

/**
 * One session state machine.
 */
typedef struct SbSession SbSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf`. Returns the
 * message length excluding the NUL; the copy is truncated to `buf_len - 1`.
 *
 * # Safety
 * `buf` must be NULL or valid for `buf_len` bytes.
 */
size_t sb_last_error_message(char *buf, size_t buf_len);

/**
 * Loads the built-in catalog.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum SbStatus sb_catalog_default(struct SbCatalog **out);

/**
 * Parses a catalog from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum SbStatus sb_catalog_from_json(const char *json, struct SbCatalog **out);

/**
 * # Safety
 * `catalog` must be NULL or a handle from this library not yet freed.
 */
void sb_catalog_free(struct SbCatalog *catalog);

/**
 * Selects the launch profile for a host and writes its id.
 *
 * `arch` is "x86_64" or "aarch64". `env` names the performance-table
 * environment; NULL means "default".
 *
 * # Safety
 * Pointer arguments follow the crate conventions.
 */
enum SbStatus sb_select_config(const struct SbCatalog *catalog,
                               const char *arch,
                               bool accel_available,
                               uint32_t cpu_limit,
                               uint64_t mem_limit,
                               double w_latency,
                               double w_surface,
                               const char *env,
                               char *buf,
                               size_t buf_len,
                               size_t *out_len);

/**
 * Writes the command line for a profile: the program, then one argument
 * per line.
 *
 * # Safety
 * Pointer arguments follow the crate conventions.
 */
enum SbStatus sb_synth_cmdline(const struct SbCatalog *catalog,
                               const char *config_id,
                               const char *image_path,
                               char *buf,
                               size_t buf_len,
                               size_t *out_len);

/**
 * # Safety
 * Pointer arguments follow the crate conventions.
 */
enum SbStatus sb_surface_score(const struct SbCatalog *catalog, const char *config_id, double *out);

/**
 * Upper bound `1 - exp(-lambda * surface)`; negative inputs count as 0.
 */
double sb_escape_bound(double lambda_vuln, double surface);

double sb_persistence_prob(double p_externalized, double p_reattach);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum SbStatus sb_host_compromise_prob(double p_escape,
                                      double p_reach,
                                      double p_persist,
                                      double *out);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum SbStatus sb_upload_time(double size_bytes,
                             double throughput_bytes_per_s,
                             double fs_overhead_s,
                             double *out);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum SbStatus sb_mm1_utilization(double arrival_rate, double service_rate, double *out);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum SbStatus sb_mm1_wait(double arrival_rate, double service_rate, double *out);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum SbStatus sb_mm1_simulate(double arrival_rate,
                              double service_rate,
                              uint64_t n_jobs,
                              uint64_t seed,
                              double *out);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum SbStatus sb_provision_for_wait(double target_wait,
                                    double arrival_rate,
                                    double service_rate_per_worker,
                                    uint64_t *out);

/**
 * Creates a session in the loader state. Its workspace is a fresh
 * directory under `workspace_root`.
 *
 * # Safety
 * Pointer arguments follow the crate conventions.
 */
enum SbStatus sb_session_new(const char *workspace_root, struct SbSession **out);

/**
 * # Safety
 * `session` must be NULL or a handle from this library not yet freed.
 */
void sb_session_free(struct SbSession *session);

/**
 * Current state; NULL reads as terminated.
 *
 * # Safety
 * `session` must be NULL or a live handle.
 */
enum SbState sb_session_state(const struct SbSession *session);

/**
 * Route for the current state; NULL reads as gone.
 *
 * # Safety
 * `session` must be NULL or a live handle.
 */
enum SbRoute sb_session_route(const struct SbSession *session);

/**
 * Upload event for a guest the caller has already started: moves the
 * session to the running state. `display` is the guest display address
 * as "host:port".
 *
 * # Safety
 * Pointer arguments follow the crate conventions.
 */
enum SbStatus sb_session_upload_complete(struct SbSession *session,
                                         const char *image_path,
                                         uint64_t size_bytes,
                                         uint32_t guest_pid,
                                         const char *display);

/**
 * Guest exit event. `has_status` tells whether `exit_status` is meaningful.
 * Scans and wipes the session workspace.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum SbStatus sb_session_vm_exit(struct SbSession *session, bool has_status, int32_t exit_status);

/**
 * Ends a session that has not started a guest.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum SbStatus sb_session_abort(struct SbSession *session, enum SbCause cause);

/**
 * Writes the session snapshot as JSON.
 *
 * # Safety
 * Pointer arguments follow the crate conventions.
 */
enum SbStatus sb_session_snapshot_json(const struct SbSession *session,
                                       char *buf,
                                       size_t buf_len,
                                       size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SANDBOX_FFI_H */
