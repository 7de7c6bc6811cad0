#ifndef LSTR_H
#define LSTR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LstrStatus {
  LSTR_STATUS_OK = 0,
  LSTR_STATUS_NULL_ARGUMENT = 1,
  LSTR_STATUS_INVALID_ARGUMENT = 2,
  LSTR_STATUS_IO = 3,
  LSTR_STATUS_FORMAT = 4,
  LSTR_STATUS_SHAPE = 5,
  LSTR_STATUS_CONFIG = 6,
  LSTR_STATUS_PANIC = 7,
} LstrStatus;

typedef enum LstrMode {
  /**
   * Cached stage-1 scores; two-stage models only.
   */
  LSTR_MODE_CACHED = 0,
  /**
   * Full recomputation at every step; any design.
   */
  LSTR_MODE_REFERENCE = 1,
} LstrMode;

/**
 * A loaded checkpoint.
 */
typedef struct LstrModel LstrModel;

/**
 * One stream's memory and caches.
 */
typedef struct LstrStream LstrStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * Valid until the next call on the same thread.
 */
const char *lstr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lstr_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LstrStatus lstr_model_load(const char *path, struct LstrModel **out);

/**
 * Loads a checkpoint from memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be writable.
 */
enum LstrStatus lstr_model_from_bytes(const uint8_t *data, size_t len, struct LstrModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from a load function and not be used afterwards.
 */
void lstr_model_free(struct LstrModel *model);

/**
 * Frame width the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t lstr_model_feature_dim(const struct LstrModel *model);

/**
 * Probabilities per step (classes plus background), or 0 for null.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t lstr_model_outputs(const struct LstrModel *model);

/**
 * Opens a stream with empty memory. `stride` keeps every `stride`-th
 * long-memory frame.
 *
 * # Safety
 * `model` must be a live model handle and `out` writable.
 */
enum LstrStatus lstr_stream_new(const struct LstrModel *model,
                                enum LstrMode mode,
                                size_t stride,
                                struct LstrStream **out);

/**
 * Pushes one frame and writes the newest position's probabilities.
 *
 * # Safety
 * `frame` must hold `frame_len` floats and `probs` have room for
 * `probs_len` floats.
 */
enum LstrStatus lstr_stream_step(struct LstrStream *stream,
                                 const float *frame,
                                 size_t frame_len,
                                 float *probs,
                                 size_t probs_len);

/**
 * Releases a stream. Null is ignored.
 *
 * # Safety
 * `stream` must come from [`lstr_stream_new`] and not be used afterwards.
 */
void lstr_stream_free(struct LstrStream *stream);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LSTR_H */
