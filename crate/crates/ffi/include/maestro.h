#ifndef MAESTRO_H
#define MAESTRO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum MaestroStatus {
  MAESTRO_STATUS_OK = 0,
  MAESTRO_STATUS_NULL_POINTER = 1,
  MAESTRO_STATUS_INVALID_ARGUMENT = 2,
  MAESTRO_STATUS_IO = 3,
  MAESTRO_STATUS_DATA = 4,
  MAESTRO_STATUS_NUMERIC = 5,
  MAESTRO_STATUS_PANIC = 6,
} MaestroStatus;

/**
 * Opaque trained model.
 */
typedef struct MaestroModel MaestroModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *maestro_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *maestro_version(void);

/**
 * Loads a JSON checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MaestroStatus maestro_model_load(const char *path, struct MaestroModel **out);

/**
 * Writes a JSON checkpoint.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum MaestroStatus maestro_model_save(const struct MaestroModel *model, const char *path);

/**
 * Trains on a CSV file and returns the best model.
 *
 * `config_json` may be null for defaults. `channels` lists the exogenous
 * columns as `name=modality` pairs separated by commas, and may be empty.
 *
 * # Safety
 * String arguments must be NUL-terminated (or null where allowed); `out`
 * must be writable.
 */
enum MaestroStatus maestro_train_csv(const char *config_json,
                                     const char *csv_path,
                                     const char *target,
                                     const char *channels,
                                     struct MaestroModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and must not be used afterwards.
 */
void maestro_model_free(struct MaestroModel *model);

/**
 * Look-back window `L`, forecast horizon `H`, input width `D` and the
 * trainable parameter count.
 *
 * # Safety
 * `model` must come from this library; each non-null output must be writable.
 */
enum MaestroStatus maestro_model_shape(const struct MaestroModel *model,
                                       size_t *window,
                                       size_t *horizon,
                                       size_t *inputs,
                                       size_t *params);

/**
 * Forecasts `batch` windows given row-major inputs `(batch, L, D)` in data
 * units and channel layout order. Writes `batch * H` means, and the same
 * number of standard deviations when `std_out` is non-null (the model must
 * estimate uncertainty in that case).
 *
 * # Safety
 * `inputs` must hold `inputs_len` doubles; `mean_out` (and `std_out` when
 * non-null) must hold `out_len` doubles.
 */
enum MaestroStatus maestro_model_forecast(const struct MaestroModel *model,
                                          const double *inputs,
                                          size_t inputs_len,
                                          size_t batch,
                                          double *mean_out,
                                          double *std_out,
                                          size_t out_len);

/**
 * Runs the finite-difference gradient suite over every module and writes
 * the largest relative error seen. Returns `Numeric` if any module fails.
 *
 * # Safety
 * `max_rel_error` must be writable or null.
 */
enum MaestroStatus maestro_gradcheck(size_t trials, uint64_t seed, double *max_rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAESTRO_H */
