#ifndef CTXVC_H
#define CTXVC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtxvcStatus {
  CTXVC_STATUS_OK = 0,
  CTXVC_STATUS_NULL_POINTER = 1,
  CTXVC_STATUS_ARGUMENT = 2,
  CTXVC_STATUS_MALFORMED_INPUT = 3,
  CTXVC_STATUS_CORRUPTION = 4,
  CTXVC_STATUS_CONFIG = 5,
  CTXVC_STATUS_UNSUPPORTED_CODEC = 6,
  CTXVC_STATUS_IO = 7,
  CTXVC_STATUS_INTERNAL = 8,
  CTXVC_STATUS_PANIC = 9,
} CtxvcStatus;

/**
 * Decoded frames, 8-bit RGB.
 */
typedef struct CtxvcFrames CtxvcFrames;

/**
 * Loaded model weights.
 */
typedef struct CtxvcModel CtxvcModel;

/**
 * Byte buffer owned by the library; release with [`ctxvc_buffer_free`].
 */
typedef struct CtxvcBuffer {
  uint8_t *data;
  size_t len;
} CtxvcBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next call.
 */
const char *ctxvc_last_error(void);

/**
 * Static, NUL-terminated version string.
 */
const char *ctxvc_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CtxvcStatus ctxvc_model_load(const char *path, struct CtxvcModel **out);

/**
 * Creates a small randomly initialized model (for tests and bindings smoke checks).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CtxvcStatus ctxvc_model_new_random(uint64_t seed, struct CtxvcModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ctxvc_model_free(struct CtxvcModel *model);

/**
 * Encodes `count` RGB8 frames (`width * height * 3` bytes each, packed)
 * with lossless intra frames every `gop` frames.
 * `entropy_mode` uses the container byte codes; 255 keeps the model default.
 *
 * # Safety
 * `rgb` must hold `count * width * height * 3` bytes; `out` must be valid.
 */
enum CtxvcStatus ctxvc_encode_rgb8(const struct CtxvcModel *model,
                                   const uint8_t *rgb,
                                   size_t count,
                                   size_t width,
                                   size_t height,
                                   size_t gop,
                                   uint8_t entropy_mode,
                                   struct CtxvcBuffer *out);

/**
 * # Safety
 * `buf` must come from this library; it is reset to empty.
 */
void ctxvc_buffer_free(struct CtxvcBuffer *buf);

/**
 * Decodes a container.
 *
 * # Safety
 * `data` must hold `len` bytes; `out` must be valid.
 */
enum CtxvcStatus ctxvc_decode(const struct CtxvcModel *model,
                              const uint8_t *data,
                              size_t len,
                              struct CtxvcFrames **out);

/**
 * # Safety
 * `frames` must be a valid handle.
 */
enum CtxvcStatus ctxvc_frames_info(const struct CtxvcFrames *frames,
                                   size_t *count,
                                   size_t *width,
                                   size_t *height);

/**
 * Copies frame `index` as packed RGB8 into `dst` (`width * height * 3` bytes).
 *
 * # Safety
 * `dst` must hold `dst_len` writable bytes.
 */
enum CtxvcStatus ctxvc_frames_copy_rgb8(const struct CtxvcFrames *frames,
                                        size_t index,
                                        uint8_t *dst,
                                        size_t dst_len);

/**
 * # Safety
 * `frames` must come from this library and not be used afterwards.
 */
void ctxvc_frames_free(struct CtxvcFrames *frames);

/**
 * PSNR in dB (capped at 100) of two packed RGB8 frames.
 *
 * # Safety
 * `a` and `b` must hold `width * height * 3` bytes; `out` must be valid.
 */
enum CtxvcStatus ctxvc_psnr_rgb8(const uint8_t *a,
                                 const uint8_t *b,
                                 size_t width,
                                 size_t height,
                                 double *out);

/**
 * BD-rate in percent of a test curve against an anchor curve.
 *
 * # Safety
 * Each array must hold the stated number of values; `out` must be valid.
 */
enum CtxvcStatus ctxvc_bd_rate(const double *anchor_bpp,
                               const double *anchor_quality,
                               size_t anchor_len,
                               const double *test_bpp,
                               const double *test_quality,
                               size_t test_len,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTXVC_H */
