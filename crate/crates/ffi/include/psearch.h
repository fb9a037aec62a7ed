#ifndef PSEARCH_H
#define PSEARCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_POINTER = 1,
  PS_STATUS_INVALID_ARGUMENT = 2,
  PS_STATUS_CONFIG = 3,
  PS_STATUS_IO = 4,
  PS_STATUS_CHECKPOINT = 5,
  /**
   * The caller's buffer is too small; the required length was written.
   */
  PS_STATUS_BUFFER_TOO_SMALL = 6,
  PS_STATUS_INTERNAL = 7,
} PsStatus;

/**
 * Opaque model handle.
 */
typedef struct PsModel PsModel;

/**
 * Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
 */
typedef struct PsBox {
  double x1;
  double y1;
  double x2;
  double y2;
} PsBox;

typedef struct PsDetection {
  struct PsBox bbox;
  double score;
} PsDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a full checkpoint. On success `*out` owns a handle that must be
 * released with `ps_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum PsStatus ps_model_load(const char *path, struct PsModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `ps_model_load` and not be used afterwards.
 */
void ps_model_free(struct PsModel *model);

/**
 * Expected image width and height.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PsStatus ps_model_image_size(const struct PsModel *model, size_t *width, size_t *height);

/**
 * Length of one embedding; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ps_model_embedding_dim(const struct PsModel *model);

/**
 * Detects persons. Writes at most `capacity` detections, best first, and
 * the total count to `*len`. If the count exceeds `capacity` nothing is
 * written to `out` and `PS_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `rgb` holds `width * height * 3` bytes, `out` has room for `capacity`
 * entries (may be null when `capacity` is 0), `len` is writable.
 */
enum PsStatus ps_detect(const struct PsModel *model,
                        const uint8_t *rgb,
                        size_t width,
                        size_t height,
                        struct PsDetection *out,
                        size_t capacity,
                        size_t *len);

/**
 * Embeddings for `n` boxes, written row by row into `out`, which must hold
 * `n * ps_model_embedding_dim(model)` values. They are not normalised;
 * compare them by cosine similarity.
 *
 * # Safety
 * `rgb` holds `width * height * 3` bytes, `boxes` holds `n` entries, `out`
 * has room for `capacity` doubles.
 */
enum PsStatus ps_embed(const struct PsModel *model,
                       const uint8_t *rgb,
                       size_t width,
                       size_t height,
                       const struct PsBox *boxes,
                       size_t n,
                       double *out,
                       size_t capacity);

/**
 * Intersection over union of two boxes.
 *
 * # Safety
 * `out` must be writable.
 */
enum PsStatus ps_iou(struct PsBox a, struct PsBox b, double *out);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call on the same thread.
 */
const char *ps_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *ps_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSEARCH_H */
