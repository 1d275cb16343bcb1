#ifndef DAMSDAN_H
#define DAMSDAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. The error kinds share their values with the CLI exit codes.
typedef enum DamsdanStatus {
  DAMSDAN_STATUS_OK = 0,
  DAMSDAN_STATUS_NULL_POINTER = 1,
  DAMSDAN_STATUS_CONFIG = 2,
  DAMSDAN_STATUS_DATA = 3,
  DAMSDAN_STATUS_NUMERIC = 4,
  DAMSDAN_STATUS_IO = 5,
  DAMSDAN_STATUS_BUFFER_TOO_SMALL = 6,
  DAMSDAN_STATUS_PANIC = 7,
} DamsdanStatus;

// Opaque handle to a trained model.
typedef struct DamsdanModel DamsdanModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length in bytes (including the terminating NUL) of the last error message
// on this thread; 1 when there is none.
size_t damsdan_last_error_length(void);

// Copies the last error message into `buf` as a NUL-terminated string.
// Returns `DAMSDAN_STATUS_BUFFER_TOO_SMALL` (and writes nothing) when `len`
// is shorter than [`damsdan_last_error_length`].
//
// # Safety
// `buf` must be writable for `len` bytes.
enum DamsdanStatus damsdan_last_error_message(char *buf, size_t len);

// Loads a JSON checkpoint written by the trainer.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string and `out` a writable pointer.
// The returned handle must be released with [`damsdan_model_free`].
enum DamsdanStatus damsdan_model_load(const char *path, struct DamsdanModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from [`damsdan_model_load`] and not be freed twice.
void damsdan_model_free(struct DamsdanModel *model);

// Expected feature count per sample, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t damsdan_model_input_dim(const struct DamsdanModel *model);

// Number of emotion classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t damsdan_model_num_classes(const struct DamsdanModel *model);

// Number of source branches, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t damsdan_model_num_sources(const struct DamsdanModel *model);

// Class probabilities for `rows` samples stored row-major in `features`
// (`rows * cols` values). Writes `rows * num_classes` values to `probs`,
// whose capacity is `probs_len`.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum DamsdanStatus damsdan_model_predict(const struct DamsdanModel *model,
                                         const double *features,
                                         size_t rows,
                                         size_t cols,
                                         double *probs,
                                         size_t probs_len);

// Squared MMD between two sample sets with a Gaussian kernel of width
// `sigma`. `unbiased` selects the U-statistic over the V-statistic.
//
// # Safety
// `a` holds `a_rows * cols` and `b` holds `b_rows * cols` doubles; `out` is
// writable.
enum DamsdanStatus damsdan_mmd_squared(const double *a,
                                       size_t a_rows,
                                       const double *b,
                                       size_t b_rows,
                                       size_t cols,
                                       double sigma,
                                       bool unbiased,
                                       double *out);

// Source fusion weights from `count` raw per-source MMD values. The values
// are scaled to sum to one, decayed by `exp(-w^2 / (2 gamma^2))` and
// renormalized, so closer sources weigh more.
//
// # Safety
// `raw_mmd` holds `count` doubles and `out` is writable for `count` doubles.
enum DamsdanStatus damsdan_fusion_weights(const double *raw_mmd,
                                          size_t count,
                                          double gamma,
                                          double *out);

// Library version as a static NUL-terminated string.
const char *damsdan_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAMSDAN_H */
