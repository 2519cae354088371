#ifndef DEPTHFLOW_H
#define DEPTHFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call.
 */
typedef enum DfStatus {
  DF_STATUS_OK = 0,
  DF_STATUS_NULL_POINTER = 1,
  DF_STATUS_INVALID_ARGUMENT = 2,
  DF_STATUS_SHAPE = 3,
  DF_STATUS_IO = 4,
  DF_STATUS_CHECKPOINT = 5,
  DF_STATUS_NUMERICAL = 6,
  DF_STATUS_PANIC = 7,
} DfStatus;

/**
 * A loaded predictor.
 */
typedef struct DfModel DfModel;

/**
 * Scores after a least-squares scale and shift of the prediction.
 */
typedef struct DfScores {
  double absrel;
  double delta1;
  double scale;
  double shift;
  double valid_fraction;
} DfScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *df_last_error_message(void);

/**
 * Loads a base checkpoint and, if `interp_path` is not null, a keyframe
 * interpolation checkpoint. `*out` receives the handle.
 *
 * # Safety
 * Paths must be null or NUL-terminated strings; `out` must be writable.
 */
enum DfStatus df_model_load(const char *base_path,
                            const char *interp_path,
                            size_t steps,
                            size_t ensemble,
                            uint64_t seed,
                            struct DfModel **out);

/**
 * Releases a handle from [`df_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`df_model_load`] and not be used afterwards.
 */
void df_model_free(struct DfModel *model);

/**
 * Predicts depth for `frames` RGB frames in [0, 1], laid out as
 * `frames x 3 x height x width`. Writes `frames x height x width` depths.
 *
 * # Safety
 * `rgb` must hold `frames*3*height*width` values and `depth_out` must have
 * room for `depth_len` values.
 */
enum DfStatus df_model_predict(const struct DfModel *model,
                               const double *rgb,
                               size_t frames,
                               size_t height,
                               size_t width,
                               double *depth_out,
                               size_t depth_len);

/**
 * AbsRel and δ1 of `pred` against `gt` over the positive ground-truth
 * pixels, after the best scale and shift.
 *
 * # Safety
 * `pred` and `gt` must hold `len` values; `out` must be writable.
 */
enum DfStatus df_aligned_scores(const double *pred,
                                const double *gt,
                                size_t len,
                                struct DfScores *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *df_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTHFLOW_H */
