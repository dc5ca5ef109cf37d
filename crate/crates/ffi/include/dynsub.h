#ifndef DYNSUB_H
#define DYNSUB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DslStatus {
  DSL_STATUS_OK = 0,
  DSL_STATUS_NULL_POINTER = 1,
  DSL_STATUS_INVALID_INPUT = 2,
  DSL_STATUS_DIMENSION = 3,
  DSL_STATUS_IO = 4,
  DSL_STATUS_FORMAT = 5,
  DSL_STATUS_CONFIG = 6,
  DSL_STATUS_BUFFER_TOO_SMALL = 7,
  DSL_STATUS_PANIC = 8,
} DslStatus;

/**
 * Opaque handle to a loaded embedding model.
 */
typedef struct DslModel DslModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length without the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t dsl_last_error_message(char *buf, size_t len);

/**
 * Loads an embedding checkpoint. On success `*out` owns a handle to
 * release with [`dsl_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum DslStatus dsl_model_load(const char *path, struct DslModel **out);

/**
 * Releases a handle from [`dsl_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void dsl_model_free(struct DslModel *model);

/**
 * Writes the expected input shape and the embedding size.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid.
 */
enum DslStatus dsl_model_shape(const struct DslModel *model,
                               size_t *channels,
                               size_t *height,
                               size_t *width,
                               size_t *embedding_dim);

/**
 * Writes the number of learners to `*k` and, if `sizes` holds at least
 * that many entries, the slice size of each learner.
 *
 * # Safety
 * `model` must be a live handle, `k` valid, `sizes` valid for `cap`
 * entries.
 */
enum DslStatus dsl_model_slices(const struct DslModel *model, size_t *sizes, size_t cap, size_t *k);

/**
 * Embeds `n` images into `out` (`n × embedding_dim` floats). Each row is
 * L2-normalized with coordinates grouped by learner, in learner order.
 *
 * # Safety
 * `images` must hold `n·C·H·W` floats and `out` `out_len` floats.
 */
enum DslStatus dsl_model_embed(const struct DslModel *model,
                               const float *images,
                               size_t n,
                               float *out,
                               size_t out_len);

/**
 * Attention maps of `n` images, upsampled to the input size, into `out`
 * (`n × H × W` floats in `[0,1]`).
 *
 * # Safety
 * `images` must hold `n·C·H·W` floats and `out` `out_len` floats.
 */
enum DslStatus dsl_model_attention(const struct DslModel *model,
                                   const float *images,
                                   size_t n,
                                   float *out,
                                   size_t out_len);

/**
 * Normalized mutual information between two labelings of `n` items.
 *
 * # Safety
 * `labels` and `clusters` must hold `n` entries; `out` must be valid.
 */
enum DslStatus dsl_nmi(const size_t *labels, const size_t *clusters, size_t n, double *out);

/**
 * Recall@k of `n` row-major `dim`-dimensional embeddings.
 *
 * # Safety
 * `embeddings` must hold `n·dim` doubles, `labels` `n` entries.
 */
enum DslStatus dsl_recall_at_k(const double *embeddings,
                               size_t n,
                               size_t dim,
                               const size_t *labels,
                               size_t k,
                               double *out);

/**
 * Dice overlap of two binary masks of `n` pixels.
 *
 * # Safety
 * `a` and `b` must hold `n` bytes; `out` must be valid.
 */
enum DslStatus dsl_dice(const uint8_t *a, const uint8_t *b, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNSUB_H */
