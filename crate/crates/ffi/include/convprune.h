#ifndef CONVPRUNE_H
#define CONVPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum CpStatus {
  CP_STATUS_OK = 0,
  CP_STATUS_NULL_POINTER = 1,
  CP_STATUS_INVALID_ARGUMENT = 2,
  CP_STATUS_SHAPE_MISMATCH = 3,
  CP_STATUS_IO = 4,
  CP_STATUS_INTEGRITY = 5,
  CP_STATUS_VERSION = 6,
  CP_STATUS_BUFFER_TOO_SMALL = 7,
  CP_STATUS_INTERNAL = 8,
} CpStatus;

typedef enum CpPooling {
  CP_POOLING_SQP = 0,
  CP_POOLING_RMAC = 1,
} CpPooling;

/**
 * Opaque model handle.
 */
typedef struct CpModel CpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *cp_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cp_version(void);

/**
 * He-initialized tinynet (3x32x32 input, 64x4x4 features).
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum CpStatus cp_model_init_tinynet(uint64_t seed, struct CpModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CpStatus cp_model_load(const char *path, struct CpModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum CpStatus cp_model_save(const struct CpModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void cp_model_free(struct CpModel *model);

/**
 * Writes `[C, H, W]` of the expected input image.
 *
 * # Safety
 * `out` must point to three writable `size_t`.
 */
enum CpStatus cp_model_input_shape(const struct CpModel *model, size_t *out);

/**
 * Writes `[C, H, W]` of the final feature map; C is the descriptor length.
 *
 * # Safety
 * `out` must point to three writable `size_t`.
 */
enum CpStatus cp_model_feature_shape(const struct CpModel *model, size_t *out);

/**
 * Total and unmasked conv weight counts.
 *
 * # Safety
 * `total` and `remaining` must be writable.
 */
enum CpStatus cp_model_weight_counts(const struct CpModel *model, size_t *total, size_t *remaining);

/**
 * Magnitude-prunes a copy of `model` to keep fraction `keep` and returns
 * it as a new handle. `achieved_keep` may be null.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum CpStatus cp_model_prune_h1(const struct CpModel *model,
                                double keep,
                                struct CpModel **out,
                                double *achieved_keep);

/**
 * Global descriptor of one image (`C*H*W` values, channel-major) written to
 * `out`, which holds `out_len` values. `levels` is ignored for SQP.
 * `written` receives the descriptor length, also when `out` is too small.
 *
 * # Safety
 * `image` must hold `image_len` values and `out` `out_len` writable values.
 */
enum CpStatus cp_model_descriptor(const struct CpModel *model,
                                  const double *image,
                                  size_t image_len,
                                  enum CpPooling pooling,
                                  size_t levels,
                                  double *out,
                                  size_t out_len,
                                  size_t *written);

/**
 * Cosine similarity of two descriptors of length `len` (0 if either is
 * all zeros).
 *
 * # Safety
 * `a` and `b` must hold `len` values; `out` must be writable.
 */
enum CpStatus cp_similarity(const double *a, const double *b, size_t len, double *out);

/**
 * Average precision of a ranked id list against a relevant id set.
 *
 * # Safety
 * `ranking` must hold `ranking_len` ids and `relevant` `relevant_len` ids.
 */
enum CpStatus cp_average_precision(const uint32_t *ranking,
                                   size_t ranking_len,
                                   const uint32_t *relevant,
                                   size_t relevant_len,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONVPRUNE_H */
