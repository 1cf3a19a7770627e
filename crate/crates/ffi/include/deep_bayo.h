#ifndef DEEP_BAYO_H
#define DEEP_BAYO_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum DbStatus {
  DB_STATUS_OK = 0,
  DB_STATUS_NULL_POINTER = 1,
  DB_STATUS_INVALID_ARGUMENT = 2,
  DB_STATUS_IO = 3,
  DB_STATUS_MODEL_FILE = 4,
  DB_STATUS_INTERNAL = 5,
  DB_STATUS_PANIC = 6,
} DbStatus;

/**
 * Opaque model handle.
 */
typedef struct DbModel DbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *db_version(void);

/**
 * Message of the last failed call on this thread, empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *db_last_error(void);

/**
 * Loads a model file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DbStatus db_model_load(const char *path, struct DbModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `m` must come from `db_model_load` and not have been freed.
 */
void db_model_free(struct DbModel *m);

/**
 * Shape of a model: trainable scalars, coordinate dimension, latent
 * dimension and number of physical parameters. Any output may be null.
 *
 * # Safety
 * `m` must be a live handle; non-null outputs must be valid.
 */
enum DbStatus db_model_shape(const struct DbModel *m,
                             size_t *param_count,
                             size_t *coord_dim,
                             size_t *latent_dim,
                             size_t *n_physical);

/**
 * Predictive mean and epistemic/aleatoric variances at `n_points` points
 * (row-major, `n_points * coord_dim` values) from `n_latent >= 2` draws.
 * Each output holds `n_points` values; the variance outputs may be null.
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
enum DbStatus db_model_predict(const struct DbModel *m,
                               const double *points,
                               size_t n_points,
                               size_t n_latent,
                               uint64_t seed,
                               double *mean,
                               double *epistemic_var,
                               double *aleatoric_var);

/**
 * `n` posterior samples of the physical parameters, written row-major
 * into `out` (`n * n_physical` values).
 *
 * # Safety
 * `out` must be valid for `n * n_physical` values.
 */
enum DbStatus db_model_posterior_samples(const struct DbModel *m,
                                         size_t n,
                                         uint64_t seed,
                                         double *out);

/**
 * KL(N(mu, sigma^2) || N(0, 1)).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DbStatus db_kl_normal(double mu, double sigma, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEEP_BAYO_H */
