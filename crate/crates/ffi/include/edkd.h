#ifndef EDKD_H
#define EDKD_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum EdkdStatus {
  EDKD_STATUS_OK = 0,
  EDKD_STATUS_CONFIG = 1,
  EDKD_STATUS_DATA = 2,
  EDKD_STATUS_STALE = 3,
  EDKD_STATUS_NUMERIC_ABORT = 4,
  EDKD_STATUS_SHAPE = 5,
  EDKD_STATUS_VALIDATION = 6,
  EDKD_STATUS_FORMAT = 7,
  EDKD_STATUS_IO = 8,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  EDKD_STATUS_INVALID_ARGUMENT = 9,
  /**
   * An internal panic was caught.
   */
  EDKD_STATUS_INTERNAL = 10,
} EdkdStatus;

/**
 * Opaque class-embedding table.
 */
typedef struct EdkdCache EdkdCache;

/**
 * Opaque student or teacher model.
 */
typedef struct EdkdModel EdkdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *edkd_last_error(void);

/**
 * Freshly initialized model (truncated-normal weights from `seed`).
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum EdkdStatus edkd_model_init(size_t layers,
                                size_t embed_dim,
                                size_t heads,
                                size_t mlp_dim,
                                size_t patch_size,
                                size_t image_size,
                                size_t num_classes,
                                uint64_t seed,
                                struct EdkdModel **out);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum EdkdStatus edkd_model_load(const char *path, struct EdkdModel **out);

/**
 * Writes a checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum EdkdStatus edkd_model_save(const struct EdkdModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void edkd_model_free(struct EdkdModel *model);

/**
 * Input image side, CLS embedding width and class count. Any out pointer may
 * be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum EdkdStatus edkd_model_dims(const struct EdkdModel *model,
                                size_t *image_size,
                                size_t *embed_dim,
                                size_t *num_classes);

/**
 * Forward pass on `batch` images. Writes `batch × embed_dim` CLS embeddings
 * and `batch × num_classes` logits; either output may be null.
 *
 * # Safety
 * `images` must hold `batch·S·S·3` floats; non-null outputs must have room
 * for their full result.
 */
enum EdkdStatus edkd_model_forward(const struct EdkdModel *model,
                                   const float *images,
                                   size_t batch,
                                   float *embeddings_out,
                                   float *logits_out);

/**
 * Loads an embedding cache (format checks only; no digest verification).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum EdkdStatus edkd_cache_load(const char *path, struct EdkdCache **out);

/**
 * Writes a cache back to disk.
 *
 * # Safety
 * `cache` must be a live handle; `path` a NUL-terminated string.
 */
enum EdkdStatus edkd_cache_save(const struct EdkdCache *cache, const char *path);

/**
 * Releases a cache. Null is ignored.
 *
 * # Safety
 * `cache` must be null or a handle not yet freed.
 */
void edkd_cache_free(struct EdkdCache *cache);

/**
 * Class count and teacher embedding width.
 *
 * # Safety
 * `cache` must be a live handle; non-null outputs must be writable.
 */
enum EdkdStatus edkd_cache_dims(const struct EdkdCache *cache,
                                size_t *num_classes,
                                size_t *embed_dim);

/**
 * Copies the `num_classes × embed_dim` table into `out` (`len` floats).
 *
 * # Safety
 * `cache` must be a live handle and `out` must hold `len` floats.
 */
enum EdkdStatus edkd_cache_table(const struct EdkdCache *cache, float *out, size_t len);

/**
 * Row-wise cross entropy of `rows × cols` logits against one target column
 * per row.
 *
 * # Safety
 * `logits` must hold `rows·cols` floats, `targets` `rows` entries.
 */
enum EdkdStatus edkd_cross_entropy(const float *logits,
                                   size_t rows,
                                   size_t cols,
                                   const uint32_t *targets,
                                   float *out);

/**
 * Contrastive loss of `b × d` student embeddings against `m × d` projected
 * teacher embeddings. `targets` gives each row's positive column; null means
 * the identity (requires `m == b`).
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum EdkdStatus edkd_clip_loss(const float *e_s,
                               size_t b,
                               const float *e_t_hat,
                               size_t m,
                               size_t d,
                               const uint32_t *targets,
                               double eps,
                               float *out);

/**
 * `T² · mean KL(softmax(z_t/T) ‖ softmax(z_s/T))` over `rows × cols` logits.
 *
 * # Safety
 * Both logit buffers must hold `rows·cols` floats.
 */
enum EdkdStatus edkd_kl_distill_loss(const float *z_s,
                                     const float *z_t,
                                     size_t rows,
                                     size_t cols,
                                     double temperature,
                                     float *out);

/**
 * Cosine-annealed learning rate at `step` of `total_steps`.
 */
double edkd_cosine_lr(size_t step, size_t total_steps, double base_lr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDKD_H */
