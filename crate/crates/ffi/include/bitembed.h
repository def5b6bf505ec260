#ifndef BITEMBED_H
#define BITEMBED_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes; zero is success.
 */
typedef enum BitembedStatus {
  BITEMBED_STATUS_OK = 0,
  BITEMBED_STATUS_NULL_POINTER = 1,
  BITEMBED_STATUS_INVALID_ARGUMENT = 2,
  BITEMBED_STATUS_IO = 3,
  BITEMBED_STATUS_FORMAT = 4,
  BITEMBED_STATUS_SHAPE = 5,
  BITEMBED_STATUS_NUMERIC = 6,
  BITEMBED_STATUS_BUFFER_TOO_SMALL = 7,
  BITEMBED_STATUS_PANIC = 8,
} BitembedStatus;

/**
 * Loaded student model.
 */
typedef struct BitembedModel BitembedModel;

/**
 * Parameter counts and storage sizes in MiB.
 */
typedef struct BitembedSizeReport {
  uint64_t param_count_total;
  uint64_t param_count_binary;
  uint64_t param_count_float;
  double float_size_mb;
  double quantized_size_mb;
  uint64_t header_bytes;
} BitembedSizeReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *bitembed_last_error(void);

/**
 * Loads a model file into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum BitembedStatus bitembed_model_load(const char *path, struct BitembedModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`bitembed_model_load`] and not be used afterwards.
 */
void bitembed_model_free(struct BitembedModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum BitembedStatus bitembed_model_embedding_dim(const struct BitembedModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum BitembedStatus bitembed_model_size_report(const struct BitembedModel *model,
                                               struct BitembedSizeReport *out);

/**
 * Log-mel spectrogram (frames × 64, row-major) of a mono waveform at any
 * sample rate. `*frames` receives the frame count even when `out` is too
 * small, so a first call with `out_len == 0` sizes the buffer.
 *
 * # Safety
 * `samples` must hold `len` floats; `out` must hold `out_len` floats;
 * `frames` must be writable.
 */
enum BitembedStatus bitembed_log_mel(const float *samples,
                                     size_t len,
                                     uint32_t sample_rate,
                                     float *out,
                                     size_t out_len,
                                     size_t *frames);

/**
 * Embeds the first one-second window of a mono waveform (zero-padded when
 * shorter) into `out[0..embedding_dim]`.
 *
 * # Safety
 * `model` must be a live handle; `samples` must hold `len` floats; `out`
 * must hold `out_len` floats.
 */
enum BitembedStatus bitembed_embed_waveform(const struct BitembedModel *model,
                                            const float *samples,
                                            size_t len,
                                            uint32_t sample_rate,
                                            float *out,
                                            size_t out_len);

/**
 * Embeds a precomputed 98 × 64 log-mel patch (row-major, `len == 6272`).
 *
 * # Safety
 * `model` must be a live handle; `logmel` must hold `len` floats; `out`
 * must hold `out_len` floats.
 */
enum BitembedStatus bitembed_embed_log_mel(const struct BitembedModel *model,
                                           const float *logmel,
                                           size_t len,
                                           float *out,
                                           size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BITEMBED_H */
