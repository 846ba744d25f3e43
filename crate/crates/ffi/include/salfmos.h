#ifndef SALFMOS_H
#define SALFMOS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Kendall tau variant for [`salf_metric_ktau`].
 */
typedef enum SalfKendall {
  /**
   * `(C - D) / (C + D)`, tied pairs excluded.
   */
  SALF_KENDALL_GAMMA = 0,
  /**
   * Tie-corrected tau-b.
   */
  SALF_KENDALL_TAU_B = 1,
} SalfKendall;

/**
 * Result codes. Zero is success.
 */
typedef enum SalfStatus {
  SALF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SALF_STATUS_NULL_POINTER = 1,
  /**
   * An argument is out of range or not valid UTF-8.
   */
  SALF_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read.
   */
  SALF_STATUS_IO = 3,
  /**
   * Input bytes are not a valid checkpoint, feature file or WAV.
   */
  SALF_STATUS_FORMAT = 4,
  /**
   * Input does not match the model's feature kind or length.
   */
  SALF_STATUS_MISMATCH = 5,
  /**
   * A correlation is undefined for the given data (constant or fully tied input).
   */
  SALF_STATUS_UNDEFINED = 6,
  /**
   * Unexpected failure, including a caught panic.
   */
  SALF_STATUS_INTERNAL = 7,
} SalfStatus;

/**
 * Opaque model handle.
 */
typedef struct SalfModel SalfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file. On success `*out` receives a handle to free
 * with `salf_model_free`; on failure it is set to null.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum SalfStatus salf_model_load(const char *path, struct SalfModel **out);

/**
 * Decodes a checkpoint held in memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` must be writable.
 */
enum SalfStatus salf_model_from_bytes(const uint8_t *data, size_t len, struct SalfModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library that has not been freed.
 */
void salf_model_free(struct SalfModel *model);

/**
 * Length of the raw feature vector the model expects, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t salf_model_feature_dim(const struct SalfModel *model);

/**
 * Padded network input length, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t salf_model_input_dim(const struct SalfModel *model);

/**
 * Feature kind tag as stored in feature files (0 mfcc, 1 lfcc, 2 wav2vec,
 * 3 xvector, 4 raw), or -1 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t salf_model_feature_kind(const struct SalfModel *model);

/**
 * Number of trainable parameters, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t salf_model_num_params(const struct SalfModel *model);

/**
 * Predicts MOS from a pooled feature vector of `salf_model_feature_dim` values.
 *
 * # Safety
 * `features` must point to `len` doubles; `out_mos` must be writable.
 */
enum SalfStatus salf_predict_features(const struct SalfModel *model,
                                      const double *features,
                                      size_t len,
                                      double *out_mos);

/**
 * Predicts MOS from the bytes of a feature file.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out_mos` must be writable.
 */
enum SalfStatus salf_predict_feature_file(const struct SalfModel *model,
                                          const uint8_t *data,
                                          size_t len,
                                          double *out_mos);

/**
 * Predicts MOS from WAV bytes. Requires a model trained on MFCC or LFCC.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out_mos` must be writable.
 */
enum SalfStatus salf_predict_wav(const struct SalfModel *model,
                                 const uint8_t *data,
                                 size_t len,
                                 double *out_mos);

/**
 * Mean squared error of `n` score pairs.
 *
 * # Safety
 * `actual` and `predicted` must each point to `n` doubles; `out` must be writable.
 */
enum SalfStatus salf_metric_mse(const double *actual,
                                const double *predicted,
                                size_t n,
                                double *out);

/**
 * Pearson linear correlation.
 *
 * # Safety
 * As for `salf_metric_mse`.
 */
enum SalfStatus salf_metric_lcc(const double *actual,
                                const double *predicted,
                                size_t n,
                                double *out);

/**
 * Spearman rank correlation with average ranks for ties.
 *
 * # Safety
 * As for `salf_metric_mse`.
 */
enum SalfStatus salf_metric_srcc(const double *actual,
                                 const double *predicted,
                                 size_t n,
                                 double *out);

/**
 * Kendall rank correlation.
 *
 * # Safety
 * As for `salf_metric_mse`.
 */
enum SalfStatus salf_metric_ktau(const double *actual,
                                 const double *predicted,
                                 size_t n,
                                 enum SalfKendall variant,
                                 double *out);

/**
 * Message for the last failed call on this thread, or an empty string.
 * Valid until the next call into this library on the same thread.
 */
const char *salf_last_error(void);

/**
 * Static description of a status code.
 */
const char *salf_status_str(enum SalfStatus status);

/**
 * Library version, e.g. "0.1.0".
 */
const char *salf_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SALFMOS_H */
