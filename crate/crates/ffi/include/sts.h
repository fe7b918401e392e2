#ifndef STS_H
#define STS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StsStatus {
  STS_STATUS_OK = 0,
  STS_STATUS_NULL_POINTER = 1,
  STS_STATUS_VALIDATION = 2,
  STS_STATUS_NUMERICAL = 3,
  STS_STATUS_IO = 4,
  STS_STATUS_PANIC = 5,
} StsStatus;

typedef enum StsMode {
  STS_MODE_SHARED = 0,
  STS_MODE_PER_CLASS = 1,
} StsMode;

typedef enum StsRankMethod {
  STS_RANK_METHOD_GAVISH_DONOHO = 0,
  STS_RANK_METHOD_ENERGY = 1,
  STS_RANK_METHOD_FIXED = 2,
} StsRankMethod;

/**
 * A decoded bundle.
 */
typedef struct StsBundle StsBundle;

/**
 * Prototypes, steering basis and settings, ready to adapt samples.
 */
typedef struct StsEngine StsEngine;

/**
 * Adaptation settings. Fill with [`sts_config_default`] before editing.
 */
typedef struct StsConfig {
  double rho;
  double lambda_reg;
  double lr;
  double weight_decay;
  uint32_t steps;
  enum StsMode mode;
  enum StsRankMethod rank_method;
  /**
   * Used when `rank_method` is energy.
   */
  double energy_fraction;
  /**
   * Used when `rank_method` is fixed.
   */
  uint32_t fixed_k;
  bool center;
  bool include_original;
  /**
   * Values ≤ 0 keep the prototypes' own scale.
   */
  double logit_scale_override;
  uint64_t seed;
} StsConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *sts_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sts_version(void);

enum StsStatus sts_config_default(struct StsConfig *out);

/**
 * Builds an engine from a row-major `rows × cols` matrix of unit-norm
 * prototypes. Classes are named `class_0`, `class_1`, ...
 *
 * # Safety
 * `prototypes` must point to `rows * cols` floats; `cfg` and `out` must be
 * valid pointers.
 */
enum StsStatus sts_engine_new(const float *prototypes,
                              size_t rows,
                              size_t cols,
                              double logit_scale,
                              const struct StsConfig *cfg,
                              struct StsEngine **out);

/**
 * Builds an engine from the prototypes referenced by a manifest.
 *
 * # Safety
 * `manifest_path` must be NUL-terminated; `cfg` and `out` must be valid.
 */
enum StsStatus sts_engine_from_manifest(const char *manifest_path,
                                        const struct StsConfig *cfg,
                                        struct StsEngine **out);

/**
 * # Safety
 * `engine` must be null or a pointer returned by an `sts_engine_*`
 * constructor that has not been freed.
 */
void sts_engine_free(struct StsEngine *engine);

/**
 * Writes the number of classes, embedding width and steering rank.
 *
 * # Safety
 * `engine` must be live; each out pointer may be null to skip it.
 */
enum StsStatus sts_engine_shape(const struct StsEngine *engine,
                                size_t *num_classes,
                                size_t *dim,
                                size_t *rank);

/**
 * Copies the steering basis, row-major `dim × rank`, into `out`.
 *
 * # Safety
 * `out` must have room for `out_len` doubles.
 */
enum StsStatus sts_engine_basis(const struct StsEngine *engine, double *out, size_t out_len);

/**
 * Adapts to one sample's views and predicts. `probs` receives the
 * adapted marginal distribution (`probs_len` ≥ number of classes).
 *
 * # Safety
 * `views` must point to `n_views * dim` floats; `probs` to `probs_len`
 * doubles; `predicted` to one `size_t`.
 */
enum StsStatus sts_engine_adapt(const struct StsEngine *engine,
                                const float *views,
                                size_t n_views,
                                size_t dim,
                                size_t original_index,
                                double *probs,
                                size_t probs_len,
                                size_t *predicted);

/**
 * Reads and strictly validates a bundle file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be valid.
 */
enum StsStatus sts_bundle_read(const char *path, struct StsBundle **out);

/**
 * Writes a row-major `rows × cols` matrix as a bundle.
 *
 * # Safety
 * `path` must be NUL-terminated; `data` must hold `rows * cols` floats.
 */
enum StsStatus sts_bundle_write(const char *path, const float *data, size_t rows, size_t cols);

/**
 * # Safety
 * `bundle` must be live.
 */
size_t sts_bundle_rows(const struct StsBundle *bundle);

/**
 * # Safety
 * `bundle` must be live.
 */
size_t sts_bundle_cols(const struct StsBundle *bundle);

/**
 * Row-major payload, valid while the bundle lives.
 *
 * # Safety
 * `bundle` must be live.
 */
const float *sts_bundle_data(const struct StsBundle *bundle);

/**
 * # Safety
 * `bundle` must be null or a live pointer from [`sts_bundle_read`].
 */
void sts_bundle_free(struct StsBundle *bundle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STS_H */
