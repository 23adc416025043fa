#ifndef DELTA_H
#define DELTA_H

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
  DELTA_STATUS_OK = 0,
  DELTA_STATUS_NULL_POINTER = 1,
  DELTA_STATUS_INVALID_UTF8 = 2,
  DELTA_STATUS_CONFIG = 3,
  DELTA_STATUS_NUMERIC = 4,
  DELTA_STATUS_CONTRACT = 5,
  DELTA_STATUS_STATE = 6,
  DELTA_STATUS_INPUT = 7,
  DELTA_STATUS_PARSE = 8,
  DELTA_STATUS_IO = 9,
  DELTA_STATUS_BUFFER_TOO_SMALL = 10,
  DELTA_STATUS_PANIC = 11,
} DeltaStatus;

/**
 * A model copy being adapted online by one method.
 */
typedef struct DeltaAdapter DeltaAdapter;

/**
 * A trained source model.
 */
typedef struct DeltaModel DeltaModel;

/**
 * Overrides applied on top of a method preset.
 */
typedef struct {
  /**
   * Test-time EMA coefficient in (0, 1).
   */
  double alpha;
  /**
   * Class-frequency momentum in (0, 1].
   */
  double lambda;
  /**
   * Adam learning rate.
   */
  double lr;
  /**
   * Seed test-time statistics from the source statistics instead of the first batch.
   */
  bool inherit_stats;
} DeltaAdapterOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *delta_version(void);

/**
 * Message of the last failed call on this thread, or null if it succeeded.
 *
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *delta_last_error_message(void);

/**
 * Loads a checkpoint written by `delta train-source`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
DeltaStatus delta_model_load(const char *path, DeltaModel **out);

/**
 * Parses a checkpoint from its JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
DeltaStatus delta_model_from_json(const char *json, DeltaModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void delta_model_free(DeltaModel *model);

/**
 * Number of input features, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t delta_model_input_dim(const DeltaModel *model);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t delta_model_classes(const DeltaModel *model);

/**
 * Class probabilities of the frozen source model.
 *
 * # Safety
 * `features` must hold `rows * cols` doubles and `out_probs` `out_len` doubles.
 */
DeltaStatus delta_model_predict(const DeltaModel *model,
                                const double *features,
                                size_t rows,
                                size_t cols,
                                double *out_probs,
                                size_t out_len);

/**
 * Defaults: alpha 0.95, lambda 0.9, lr 1e-3, first-batch statistics.
 */
DeltaAdapterOptions delta_adapter_options_default(void);

/**
 * Starts an adaptation episode on a copy of `model` with a named method such as
 * `tent+delta`. `options` may be null for the defaults.
 *
 * # Safety
 * `model` must be a live handle, `method` a NUL-terminated string, `options` null or
 * valid, and `out` a valid pointer.
 */
DeltaStatus delta_adapter_new(const DeltaModel *model,
                              const char *method,
                              const DeltaAdapterOptions *options,
                              DeltaAdapter **out);

/**
 * # Safety
 * `adapter` must come from this library and not be used afterwards. Null is ignored.
 */
void delta_adapter_free(DeltaAdapter *adapter);

/**
 * Processes one arriving mini-batch: writes its predictions, then adapts.
 *
 * # Safety
 * `features` must hold `rows * cols` doubles and `out_probs` `out_len` doubles.
 */
DeltaStatus delta_adapter_step(DeltaAdapter *adapter,
                               const double *features,
                               size_t rows,
                               size_t cols,
                               double *out_probs,
                               size_t out_len);

/**
 * Predictions with the current parameters, without adapting.
 *
 * # Safety
 * `features` must hold `rows * cols` doubles and `out_probs` `out_len` doubles.
 */
DeltaStatus delta_adapter_predict(DeltaAdapter *adapter,
                                  const double *features,
                                  size_t rows,
                                  size_t cols,
                                  double *out_probs,
                                  size_t out_len);

/**
 * Number of parameter updates performed so far, or 0 for a null handle.
 *
 * # Safety
 * `adapter` must be null or a live handle.
 */
uint64_t delta_adapter_updates(const DeltaAdapter *adapter);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELTA_H */
