#ifndef CAMIXER_H
#define CAMIXER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. The nonzero values match the command-line exit codes.
 */
typedef enum CamixerStatus {
  CAMIXER_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  CAMIXER_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument or configuration.
   */
  CAMIXER_STATUS_USAGE = 2,
  /**
   * Bad or inconsistent input data, or an I/O failure.
   */
  CAMIXER_STATUS_DATA = 3,
  /**
   * Training or inference produced non-finite values.
   */
  CAMIXER_STATUS_NUMERIC = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  CAMIXER_STATUS_PANIC = 5,
} CamixerStatus;

/**
 * Opaque trained model.
 */
typedef struct CamixerModel CamixerModel;

/**
 * Evaluation counts and scores.
 */
typedef struct CamixerMetrics {
  uint64_t tp;
  uint64_t tn;
  uint64_t fp;
  uint64_t fn_;
  uint64_t oe;
  double pcc;
  double kc;
  /**
   * Nonzero when kappa used the single-class convention.
   */
  uint8_t kc_degenerate;
} CamixerMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *camixer_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *camixer_version(void);

/**
 * Loads a model from a serialized buffer (the `model.camx` file contents).
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out` must be writable.
 */
enum CamixerStatus camixer_model_load(const uint8_t *bytes, size_t len, struct CamixerModel **out);

/**
 * Serialized size of `model` in bytes.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t camixer_model_saved_len(const struct CamixerModel *model);

/**
 * Serializes `model` into `buf`, which must hold
 * [`camixer_model_saved_len`] bytes.
 *
 * # Safety
 * `model` must be a live handle; `buf` must point to `len` writable bytes.
 */
enum CamixerStatus camixer_model_save(const struct CamixerModel *model, uint8_t *buf, size_t len);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void camixer_model_free(struct CamixerModel *model);

/**
 * Number of trainable parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t camixer_model_param_count(const struct CamixerModel *model);

/**
 * Renders the synthetic scene into caller buffers of `height * width`.
 *
 * # Safety
 * `t1`, `t2` and `truth` must each point to `height * width` writable values.
 */
enum CamixerStatus camixer_generate_scene(size_t height,
                                          size_t width,
                                          double change_gain,
                                          uint32_t looks,
                                          uint64_t seed,
                                          double *t1,
                                          double *t2,
                                          uint8_t *truth);

/**
 * Preclassifies the pair and trains a model on it. `config` is optional
 * `key = value` text (null for defaults).
 *
 * # Safety
 * `t1` and `t2` must each point to `height * width` doubles; `config` must be
 * null or nul-terminated; `out` must be writable.
 */
enum CamixerStatus camixer_train(const double *t1,
                                 const double *t2,
                                 size_t height,
                                 size_t width,
                                 const char *config,
                                 struct CamixerModel **out);

/**
 * Classifies every pixel of the pair into `mask` (0 unchanged, 1 changed).
 * `tile` is the inference batch size; 0 selects the default.
 *
 * # Safety
 * `model` must be a live handle; `t1`, `t2` must point to `height * width`
 * doubles and `mask` to `height * width` writable bytes.
 */
enum CamixerStatus camixer_predict(const struct CamixerModel *model,
                                   const double *t1,
                                   const double *t2,
                                   size_t height,
                                   size_t width,
                                   size_t tile,
                                   uint8_t *mask);

/**
 * Scores a predicted mask against ground truth.
 *
 * # Safety
 * `pred` and `truth` must point to `height * width` bytes; `out` must be
 * writable.
 */
enum CamixerStatus camixer_evaluate(const uint8_t *pred,
                                    const uint8_t *truth,
                                    size_t height,
                                    size_t width,
                                    struct CamixerMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAMIXER_H */
