#ifndef LOOPGAS_H
#define LOOPGAS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LgStatus {
  LG_STATUS_OK = 0,
  LG_STATUS_NULL_POINTER = 1,
  LG_STATUS_INVALID_UTF8 = 2,
  LG_STATUS_VALIDATION = 3,
  LG_STATUS_DOMAIN = 4,
  LG_STATUS_IO = 5,
  LG_STATUS_PANIC = 6,
} LgStatus;

typedef enum LgMethod {
  LG_METHOD_ED = 0,
  LG_METHOD_DIRECT = 1,
  LG_METHOD_CLUSTER = 2,
} LgMethod;

/**
 * Opaque model handle.
 */
typedef struct LgModel LgModel;

typedef struct LgNorms {
  double m;
  double m0_re;
  double m0_im;
  double ml;
  double psi_norm;
  double psi_l_norm;
} LgNorms;

typedef struct LgDiagnostics {
  double q;
  double q_l;
  double p;
  double p_l;
  bool all_satisfied;
} LgDiagnostics;

typedef struct LgEstimate {
  double value_re;
  double value_im;
  double stat_error;
  double tail_bound;
  bool exact;
} LgEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *lg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lg_version(void);

/**
 * Parses an experiment configuration (JSON text) into a new model handle.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum LgStatus lg_model_from_json(const char *json, struct LgModel **out);

/**
 * Releases a handle; NULL is ignored.
 *
 * # Safety
 * `model` must come from `lg_model_from_json` and not be used afterwards.
 */
void lg_model_free(struct LgModel *model);

/**
 * Replaces the fugacity.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum LgStatus lg_model_set_fugacity(struct LgModel *model, double re, double im);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum LgStatus lg_model_norms(const struct LgModel *model, struct LgNorms *out);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum LgStatus lg_model_diagnostics(const struct LgModel *model, struct LgDiagnostics *out);

/**
 * ln Z of the configured box at scale R by the chosen method.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum LgStatus lg_log_partition(const struct LgModel *model,
                               enum LgMethod method,
                               double scale,
                               struct LgEstimate *out);

/**
 * Boundary coefficient of the given order, averaged over equivalent sets.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum LgStatus lg_coefficient(const struct LgModel *model, uint32_t order, struct LgEstimate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOOPGAS_H */
