#ifndef FHMM_SDP_H
#define FHMM_SDP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; the non-zero values match the command-line exit codes
 * where they overlap.
 */
typedef enum FhmmSdpStatus {
  FHMM_SDP_STATUS_OK = 0,
  FHMM_SDP_STATUS_CAPACITY = 2,
  FHMM_SDP_STATUS_INVALID_INPUT = 3,
  FHMM_SDP_STATUS_NUMERICAL = 4,
  FHMM_SDP_STATUS_NULL_POINTER = 5,
  FHMM_SDP_STATUS_PANIC = 6,
} FhmmSdpStatus;

/**
 * Inference method for [`fhmm_sdp_infer`].
 */
typedef enum FhmmSdpMethod {
  /**
   * Relaxation with argmax rounding.
   */
  FHMM_SDP_METHOD_ADMM = 0,
  /**
   * Relaxation with randomized rounding and greedy descent.
   */
  FHMM_SDP_METHOD_ADMM_RR = 1,
  /**
   * Joint-state dynamic programming.
   */
  FHMM_SDP_METHOD_EXACT = 2,
} FhmmSdpMethod;

typedef struct FhmmSdpModel FhmmSdpModel;

typedef struct FhmmSdpResult FhmmSdpResult;

typedef struct FhmmSdpTrace FhmmSdpTrace;

typedef struct FhmmSdpInferOptions {
  enum FhmmSdpMethod method;
  double mu_step;
  size_t max_sweeps;
  double tolerance;
  size_t samples_per_window;
  size_t trigger_period;
  uint64_t seed;
  /**
   * Non-zero adds the edge-matching cost.
   */
  int32_t use_edges;
} FhmmSdpInferOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fhmm_sdp_last_error(void);

/**
 * Parses a model from NUL-terminated JSON.
 *
 * # Safety
 * `json` must be a valid C string and `out` a valid pointer.
 */
enum FhmmSdpStatus fhmm_sdp_model_from_json(const char *json, struct FhmmSdpModel **out);

/**
 * # Safety
 * `model` must come from [`fhmm_sdp_model_from_json`] and not be used again.
 */
void fhmm_sdp_model_free(struct FhmmSdpModel *model);

/**
 * Number of appliances, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fhmm_sdp_model_num_appliances(const struct FhmmSdpModel *model);

/**
 * States of appliance `i`, 0 when out of range.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fhmm_sdp_model_num_states(const struct FhmmSdpModel *model, size_t i);

/**
 * Copies `len` aggregate readings into a new trace.
 *
 * # Safety
 * `aggregate` must point to `len` doubles and `out` must be valid.
 */
enum FhmmSdpStatus fhmm_sdp_trace_new(const double *aggregate,
                                      size_t len,
                                      struct FhmmSdpTrace **out);

/**
 * # Safety
 * `trace` must come from [`fhmm_sdp_trace_new`] and not be used again.
 */
void fhmm_sdp_trace_free(struct FhmmSdpTrace *trace);

/**
 * # Safety
 * `trace` must be null or a live handle.
 */
size_t fhmm_sdp_trace_len(const struct FhmmSdpTrace *trace);

/**
 * Defaults matching the command-line tool.
 */
struct FhmmSdpInferOptions fhmm_sdp_infer_options_default(void);

/**
 * Objective of a state sequence given as `len × M` row-major 0-based
 * indices. Forbidden transitions give infinity.
 *
 * # Safety
 * Handles must be live, `states` must hold `len * M` values and `out`
 * must be valid.
 */
enum FhmmSdpStatus fhmm_sdp_objective(const struct FhmmSdpModel *model,
                                      const struct FhmmSdpTrace *trace,
                                      const size_t *states,
                                      size_t len,
                                      int32_t use_edges,
                                      double *out);

/**
 * Runs inference and returns a result handle.
 *
 * # Safety
 * Handles must be live; `options` may be null for defaults; `out` must
 * be valid.
 */
enum FhmmSdpStatus fhmm_sdp_infer(const struct FhmmSdpModel *model,
                                  const struct FhmmSdpTrace *trace,
                                  const struct FhmmSdpInferOptions *options,
                                  struct FhmmSdpResult **out);

/**
 * # Safety
 * `result` must come from [`fhmm_sdp_infer`] and not be used again.
 */
void fhmm_sdp_result_free(struct FhmmSdpResult *result);

/**
 * Number of time steps, 0 for a null handle.
 *
 * # Safety
 * `result` must be null or a live handle.
 */
size_t fhmm_sdp_result_len(const struct FhmmSdpResult *result);

/**
 * # Safety
 * `result` must be null or a live handle.
 */
size_t fhmm_sdp_result_num_appliances(const struct FhmmSdpResult *result);

/**
 * MAP objective of the returned states; NaN for a null handle.
 *
 * # Safety
 * `result` must be null or a live handle.
 */
double fhmm_sdp_result_objective(const struct FhmmSdpResult *result);

/**
 * Relaxed objective; NaN for exact inference.
 *
 * # Safety
 * `result` must be null or a live handle.
 */
double fhmm_sdp_result_relaxed_objective(const struct FhmmSdpResult *result);

/**
 * 1 if the solver met its tolerance (always 1 for exact inference).
 *
 * # Safety
 * `result` must be null or a live handle.
 */
int32_t fhmm_sdp_result_converged(const struct FhmmSdpResult *result);

/**
 * Copies the `len × M` row-major 0-based states into `out`, which must
 * hold at least `capacity` values.
 *
 * # Safety
 * `result` must be live and `out` must point to `capacity` writable values.
 */
enum FhmmSdpStatus fhmm_sdp_result_states(const struct FhmmSdpResult *result,
                                          size_t *out,
                                          size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FHMM_SDP_H */
