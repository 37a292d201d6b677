#ifndef SFANET_H
#define SFANET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SfaStatus {
  SFA_STATUS_OK = 0,
  SFA_STATUS_NULL_POINTER = 1,
  SFA_STATUS_INVALID_ARGUMENT = 2,
  SFA_STATUS_SHAPE_MISMATCH = 3,
  SFA_STATUS_IO = 4,
  SFA_STATUS_FORMAT = 5,
  SFA_STATUS_CHECKPOINT = 6,
  SFA_STATUS_UNINITIALIZED_STATS = 7,
  SFA_STATUS_PANIC = 8,
} SfaStatus;

/**
 * Density and attention maps from one inference, `width × height` each.
 */
typedef struct SfaMaps SfaMaps;

/**
 * A model instance.
 */
typedef struct SfaModel SfaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *sfa_last_error(void);

/**
 * Library version as a static string.
 */
const char *sfa_version(void);

/**
 * Builds a freshly initialized model.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum SfaStatus sfa_model_new(double width_multiplier,
                             bool amp_enabled,
                             uint64_t seed,
                             struct SfaModel **out);

/**
 * Destroys a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`sfa_model_new`] and not be used afterwards.
 */
void sfa_model_free(struct SfaModel *model);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SfaStatus sfa_model_param_count(const struct SfaModel *model, size_t *out);

/**
 * Loads a checkpoint. With `strict` every tensor must match; otherwise
 * the overlap is loaded.
 *
 * # Safety
 * `model` must be a live handle and `path` a nul-terminated string.
 */
enum SfaStatus sfa_model_load(struct SfaModel *model, const char *path, bool strict);

/**
 * Writes the model parameters and statistics to `path`.
 *
 * # Safety
 * `model` must be a live handle and `path` a nul-terminated string.
 */
enum SfaStatus sfa_model_save(const struct SfaModel *model, const char *path);

/**
 * Counts people in a planar RGB image (`3 × height × width` floats in
 * `[0,1]`). Writes the count to `count` and, when `maps` is not null, a
 * new maps handle covering the `ceil(width/2) × ceil(height/2)` output.
 *
 * # Safety
 * `model` must be a live handle, `rgb` must hold `3·width·height` floats
 * and `count` must be writable; `maps` may be null.
 */
enum SfaStatus sfa_model_infer(struct SfaModel *model,
                               const float *rgb,
                               size_t width,
                               size_t height,
                               double *count,
                               struct SfaMaps **maps);

/**
 * Map width, or 0 for null.
 *
 * # Safety
 * `maps` must be null or a live handle.
 */
size_t sfa_maps_width(const struct SfaMaps *maps);

/**
 * Map height, or 0 for null.
 *
 * # Safety
 * `maps` must be null or a live handle.
 */
size_t sfa_maps_height(const struct SfaMaps *maps);

/**
 * Row-major density values, owned by `maps`.
 *
 * # Safety
 * `maps` must be null or a live handle.
 */
const float *sfa_maps_density(const struct SfaMaps *maps);

/**
 * Row-major attention values in (0,1), owned by `maps`.
 *
 * # Safety
 * `maps` must be null or a live handle.
 */
const float *sfa_maps_attention(const struct SfaMaps *maps);

/**
 * Destroys a maps handle. Null is ignored.
 *
 * # Safety
 * `maps` must come from [`sfa_model_infer`] and not be used afterwards.
 */
void sfa_maps_free(struct SfaMaps *maps);

/**
 * Kernel size and sigma for an image of the given width.
 *
 * # Safety
 * `size` and `sigma` must be writable.
 */
enum SfaStatus sfa_adaptive_kernel(size_t width, size_t *size, double *sigma);

/**
 * Renders a density map for `n_points` head positions given as
 * interleaved `x, y` pairs into `out` (`width × height`, row-major).
 *
 * # Safety
 * `points` must hold `2·n_points` doubles (may be null when `n_points` is
 * 0) and `out` must hold `width·height` floats.
 */
enum SfaStatus sfa_render_density(const double *points,
                                  size_t n_points,
                                  size_t width,
                                  size_t height,
                                  size_t kernel_size,
                                  double sigma,
                                  float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFANET_H */
