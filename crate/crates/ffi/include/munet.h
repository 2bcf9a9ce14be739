#ifndef MUNET_H
#define MUNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum MunetStatus {
  MUNET_STATUS_OK = 0,
  MUNET_STATUS_NULL_POINTER = 1,
  MUNET_STATUS_INVALID_ARGUMENT = 2,
  MUNET_STATUS_IO = 3,
  MUNET_STATUS_CONFIG = 4,
  MUNET_STATUS_CHECKPOINT = 5,
  MUNET_STATUS_UNKNOWN_TASK = 6,
  MUNET_STATUS_BUFFER_TOO_SMALL = 7,
  MUNET_STATUS_INTERNAL = 8,
} MunetStatus;

/**
 * A loaded multitask system.
 */
typedef struct MunetSystem MunetSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *munet_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on this thread.
 */
const char *munet_last_error(void);

/**
 * Loads a checkpoint directory into a new handle written to `out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum MunetStatus munet_system_load(const char *dir, struct MunetSystem **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `h` must be null or a live handle; it must not be used afterwards.
 */
void munet_system_free(struct MunetSystem *h);

/**
 * Number of tasks with a best model.
 *
 * # Safety
 * `h` must be a live handle; `out` must be writable.
 */
enum MunetStatus munet_task_count(const struct MunetSystem *h, size_t *out);

/**
 * Name of task `index` (sorted order). The string lives as long as the handle.
 *
 * # Safety
 * `h` must be a live handle; `out` must be writable.
 */
enum MunetStatus munet_task_name(const struct MunetSystem *h, size_t index, const char **out);

/**
 * Number of output classes of the best model for `task`.
 *
 * # Safety
 * `h` must be a live handle; `task` a NUL-terminated string; `out` writable.
 */
enum MunetStatus munet_task_num_classes(const struct MunetSystem *h, const char *task, size_t *out);

/**
 * Accounted parameter count of the best model for `task`.
 *
 * # Safety
 * `h` must be a live handle; `task` a NUL-terminated string; `out` writable.
 */
enum MunetStatus munet_accounted_params(const struct MunetSystem *h, const char *task, double *out);

/**
 * Logits of the best model for `task` on `count` images of
 * `height × width × channels` bytes each (row-major, channels last).
 *
 * Writes `count × classes` floats to `out` when `out_capacity` suffices;
 * `out_len` always receives the required length.
 *
 * # Safety
 * `pixels` must hold `count·height·width·channels` bytes; `out` must hold
 * `out_capacity` floats; `out_len` must be writable.
 */
enum MunetStatus munet_eval_logits(const struct MunetSystem *h,
                                   const char *task,
                                   const uint8_t *pixels,
                                   size_t count,
                                   size_t height,
                                   size_t width,
                                   size_t channels,
                                   float *out,
                                   size_t out_capacity,
                                   size_t *out_len);

/**
 * Runs the evolutionary search for the config file at `config_path` and
 * writes `run.jsonl`, `summary.json` and `checkpoint/` under `out_dir`.
 *
 * # Safety
 * Both arguments must be NUL-terminated paths.
 */
enum MunetStatus munet_evolve(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MUNET_H */
