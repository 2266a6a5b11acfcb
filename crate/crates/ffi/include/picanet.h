#ifndef PICANET_H
#define PICANET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PicanetGridMode {
  PICANET_GRID_MODE_GLOBAL = 0,
  PICANET_GRID_MODE_LOCAL = 1,
} PicanetGridMode;

/**
 * Which single-image metric [`picanet_metric`] computes.
 */
typedef enum PicanetMetric {
  PICANET_METRIC_MAE = 0,
  PICANET_METRIC_MAX_F = 1,
  PICANET_METRIC_S_MEASURE = 2,
} PicanetMetric;

typedef enum PicanetStatus {
  PICANET_STATUS_OK = 0,
  PICANET_STATUS_NULL_POINTER = 1,
  PICANET_STATUS_INVALID_ARGUMENT = 2,
  PICANET_STATUS_SHAPE_MISMATCH = 3,
  PICANET_STATUS_IO = 4,
  PICANET_STATUS_FORMAT = 5,
  PICANET_STATUS_CONFIG = 6,
  PICANET_STATUS_PANIC = 7,
} PicanetStatus;

/**
 * Opaque model handle.
 */
typedef struct PicanetModel PicanetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call into the library from this thread.
 */
const char *picanet_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum PicanetStatus picanet_model_load(const char *path, struct PicanetModel **out);

/**
 * Builds a freshly initialized model with the default desk-scale widths.
 *
 * # Safety
 * `preset` must be a nul-terminated string and `out` a valid pointer.
 */
enum PicanetStatus picanet_model_new(const char *preset, uint64_t seed, struct PicanetModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void picanet_model_free(struct PicanetModel *model);

/**
 * Side length of the square input the model expects, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t picanet_model_input_size(const struct PicanetModel *model);

/**
 * Saliency for `n` images of `size × size × 3` values in `[0, 1]`; writes
 * `n × size × size` values to `out`.
 *
 * # Safety
 * `images` must hold `n·size·size·3` floats and `out` `n·size·size`.
 */
enum PicanetStatus picanet_model_predict(const struct PicanetModel *model,
                                         const float *images,
                                         size_t n,
                                         size_t size,
                                         float *out);

/**
 * Attention pooling of features `(n, h, w, c)` with weights
 * `(n, h, w, grid²)`; writes `(n, h, w, c)` to `out`.
 *
 * # Safety
 * Every buffer must hold the number of floats its shape implies.
 */
enum PicanetStatus picanet_attend_pool(const float *features,
                                       const float *weights,
                                       size_t n,
                                       size_t h,
                                       size_t w,
                                       size_t c,
                                       enum PicanetGridMode mode,
                                       size_t grid,
                                       size_t dilation,
                                       float *out);

/**
 * Attention convolution with a local `k × k` grid: gates `(n, h, w, k²)`,
 * kernel `(k, k, c_in, c_out)`, bias `c_out`; writes `(n, h, w, c_out)`.
 *
 * # Safety
 * Every buffer must hold the number of floats its shape implies.
 */
enum PicanetStatus picanet_attend_conv(const float *features,
                                       const float *gates,
                                       size_t n,
                                       size_t h,
                                       size_t w,
                                       size_t c_in,
                                       size_t k,
                                       size_t dilation,
                                       const float *kernel,
                                       const float *bias,
                                       size_t c_out,
                                       float *out);

/**
 * One metric of an `h × w` prediction against its ground truth, both in
 * `[0, 1]`.
 *
 * # Safety
 * `pred` and `gt` must hold `h·w` floats; `out` must be valid.
 */
enum PicanetStatus picanet_metric(enum PicanetMetric metric,
                                  const float *pred,
                                  const float *gt,
                                  size_t h,
                                  size_t w,
                                  double *out);

/**
 * Library version as a static nul-terminated string.
 */
const char *picanet_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PICANET_H */
