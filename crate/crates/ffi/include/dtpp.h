#ifndef DTPP_H
#define DTPP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DtppStatus {
  DTPP_STATUS_OK = 0,
  DTPP_STATUS_NULL_POINTER = 1,
  DTPP_STATUS_INVALID_ARGUMENT = 2,
  DTPP_STATUS_IO = 3,
  DTPP_STATUS_PARSE = 4,
  DTPP_STATUS_INVALID_SEQUENCE = 5,
  DTPP_STATUS_NUMERIC = 6,
  DTPP_STATUS_BUFFER_TOO_SMALL = 7,
  DTPP_STATUS_PANIC = 8,
} DtppStatus;

/**
 * Fitted inter-event mixture plus mark classifier.
 */
typedef struct DtppModel DtppModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *dtpp_last_error(void);

/**
 * NUL-terminated library version.
 */
const char *dtpp_version(void);

/**
 * Loads a mixture document and a mark-model document written by the CLI.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum DtppStatus dtpp_model_load(const char *mixture_path,
                                const char *marks_path,
                                struct DtppModel **out);

/**
 * Releases a handle from [`dtpp_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`dtpp_model_load`] and not be used afterwards.
 */
void dtpp_model_free(struct DtppModel *model);

/**
 * Mark alphabet size, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dtpp_model_num_marks(const struct DtppModel *model);

/**
 * `ln g(tau | prev_mark)`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum DtppStatus dtpp_log_pdf(const struct DtppModel *model, double tau, uint32_t prev, double *out);

/**
 * Mean inter-event time after `prev_mark`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum DtppStatus dtpp_mean_gap(const struct DtppModel *model, uint32_t prev, double *out);

/**
 * Mark distribution at time `t` given `n` history events; `out[k-1]` receives `p(k | t)`.
 *
 * # Safety
 * `times`/`marks` must hold `n` entries; `out` must hold `out_len` doubles.
 */
enum DtppStatus dtpp_mark_pmf(const struct DtppModel *model,
                              const double *times,
                              const uint32_t *marks,
                              size_t n,
                              double t,
                              double *out,
                              size_t out_len);

/**
 * Next-event prediction. Pass NaN as `true_next_time` to evaluate the mark at
 * the predicted time instead of a known one.
 *
 * # Safety
 * `times`/`marks` must hold `n` entries; outputs must be writable.
 */
enum DtppStatus dtpp_predict_next(const struct DtppModel *model,
                                  const double *times,
                                  const uint32_t *marks,
                                  size_t n,
                                  double true_next_time,
                                  double *time_out,
                                  uint32_t *mark_out);

/**
 * Deterministic rollout of `p` events into `times_out[0..p]` / `marks_out[0..p]`.
 *
 * # Safety
 * Inputs must hold `n` entries; outputs must hold `p` entries.
 */
enum DtppStatus dtpp_rollout(const struct DtppModel *model,
                             const double *times,
                             const uint32_t *marks,
                             size_t n,
                             size_t p,
                             double *times_out,
                             uint32_t *marks_out);

/**
 * Log-likelihood of a sequence observed on `[0, window_end)`.
 *
 * # Safety
 * `times`/`marks` must hold `n` entries; `out` must be writable.
 */
enum DtppStatus dtpp_loglik(const struct DtppModel *model,
                            const double *times,
                            const uint32_t *marks,
                            size_t n,
                            double window_end,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DTPP_H */
