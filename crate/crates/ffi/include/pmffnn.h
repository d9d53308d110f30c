#ifndef PMFFNN_H
#define PMFFNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  PMFFNN_STATUS_OK = 0,
  PMFFNN_STATUS_NULL_POINTER = 1,
  PMFFNN_STATUS_INVALID_ARGUMENT = 2,
  PMFFNN_STATUS_CONFIG = 3,
  PMFFNN_STATUS_SHAPE = 4,
  PMFFNN_STATUS_DATA = 5,
  PMFFNN_STATUS_IO = 6,
  PMFFNN_STATUS_MODEL_FORMAT = 7,
  PMFFNN_STATUS_DIVERGENCE = 8,
  PMFFNN_STATUS_INTERNAL = 9,
  PMFFNN_STATUS_PANIC = 10,
} PmffnnStatus;

/**
 * Opaque model handle.
 */
typedef struct PmffnnModel PmffnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a freshly initialized model from an architecture config (JSON).
 *
 * # Safety
 * `config_json` must be a nul-terminated string; `out` must be writable.
 */
PmffnnStatus pmffnn_model_from_config(const char *config_json, uint64_t seed, PmffnnModel **out);

/**
 * Loads a model file written by [`pmffnn_model_save`] or the `pmffnn train` command.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
PmffnnStatus pmffnn_model_load(const char *path, PmffnnModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a nul-terminated string.
 */
PmffnnStatus pmffnn_model_save(const PmffnnModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void pmffnn_model_free(PmffnnModel *model);

/**
 * Input width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pmffnn_model_n_features(const PmffnnModel *model);

/**
 * Output width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pmffnn_model_n_outputs(const PmffnnModel *model);

/**
 * Trainable parameter count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pmffnn_model_param_count(const PmffnnModel *model);

/**
 * Caps concurrently executing pathways; 1 runs them sequentially.
 *
 * # Safety
 * `model` must be a live handle.
 */
PmffnnStatus pmffnn_model_set_threads(PmffnnModel *model, size_t threads);

/**
 * Inference-mode forward pass. `x` is `rows × cols`; `out` receives
 * `rows × n_outputs` values and `out_len` must be at least that. Stored input
 * standardization, if any, is applied first.
 *
 * # Safety
 * `x` must hold `rows·cols` doubles and `out` `out_len` doubles.
 */
PmffnnStatus pmffnn_model_predict(PmffnnModel *model,
                                  const double *x,
                                  size_t rows,
                                  size_t cols,
                                  double *out,
                                  size_t out_len);

/**
 * Trains a classification model in place. `labels` holds `rows` class
 * indices below `n_outputs`. `train_config_json` may be null for defaults.
 * The last epoch's training loss is written to `final_loss` when non-null.
 *
 * # Safety
 * `x` must hold `rows·cols` doubles, `labels` `rows` entries.
 */
PmffnnStatus pmffnn_model_fit_classification(PmffnnModel *model,
                                             const double *x,
                                             size_t rows,
                                             size_t cols,
                                             const size_t *labels,
                                             const char *train_config_json,
                                             double *final_loss);

/**
 * Trains a regression model in place against `rows × y_cols` targets.
 *
 * # Safety
 * `x` must hold `rows·cols` doubles, `y` `rows·y_cols` doubles.
 */
PmffnnStatus pmffnn_model_fit_regression(PmffnnModel *model,
                                         const double *x,
                                         size_t rows,
                                         size_t cols,
                                         const double *y,
                                         size_t y_cols,
                                         const char *train_config_json,
                                         double *final_loss);

/**
 * Message for the most recent failed call on this thread (empty after a
 * success). Valid until the next call into this library on the same thread.
 */
const char *pmffnn_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *pmffnn_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PMFFNN_H */
