#ifndef RANKCF_H
#define RANKCF_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_POINTER = 1,
  CF_STATUS_INVALID_INPUT = 2,
  CF_STATUS_COVERAGE = 3,
  CF_STATUS_RUNTIME = 4,
  CF_STATUS_PANIC = 5,
} CfStatus;

typedef enum CfKernel {
  CF_KERNEL_GAUSSIAN = 0,
  CF_KERNEL_EPANECHNIKOV = 1,
} CfKernel;

/**
 * Opaque dataset handle.
 */
typedef struct CfDataset CfDataset;

/**
 * Opaque estimator handle. Owns a copy of its reference pool.
 */
typedef struct CfEstimator CfEstimator;

typedef struct CfEstimate {
  double y_hat;
  double loss_at_min;
  double n_effective;
  /**
   * 0 when the estimate was clamped to an extreme knot.
   */
  int32_t bounded;
  int32_t coverage_ok;
} CfEstimate;

typedef struct CfRankReport {
  double rho;
  double rho_tilde;
  uint64_t n_concordant;
  uint64_t n_discordant;
} CfRankReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *cf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cf_version(void);

/**
 * Builds a dataset from row-major covariates (`n * m` values). All rows
 * are marked as training rows.
 *
 * # Safety
 * Array pointers must reference at least the stated number of values and
 * `out` must be a valid pointer.
 */
enum CfStatus cf_dataset_from_arrays(const double *treatments,
                                     const double *covariates,
                                     const double *outcomes,
                                     size_t n,
                                     size_t m,
                                     struct CfDataset **out);

/**
 * Loads a CSV with columns `x`, `y`, an optional `split` and covariates.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CfStatus cf_dataset_load_csv(const char *path, struct CfDataset **out);

/**
 * # Safety
 * `ds` must come from this library and not be used afterwards. Null is ignored.
 */
void cf_dataset_free(struct CfDataset *ds);

/**
 * Number of rows, 0 for null.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t cf_dataset_len(const struct CfDataset *ds);

/**
 * Number of covariates, 0 for null.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t cf_dataset_dim(const struct CfDataset *ds);

/**
 * Creates an estimator over the training rows of `ds`.
 *
 * With `p_treated` in (0, 1) the propensity is that constant; otherwise
 * a logistic model is fitted on the training rows with penalty `l2` and
 * probability floor `clip`.
 *
 * # Safety
 * `ds` must be a live handle and `out` a valid pointer.
 */
enum CfStatus cf_estimator_new(const struct CfDataset *ds,
                               enum CfKernel kernel,
                               double bandwidth,
                               double p_treated,
                               double l2,
                               double clip,
                               struct CfEstimator **out);

/**
 * # Safety
 * `est` must come from this library and not be used afterwards. Null is ignored.
 */
void cf_estimator_free(struct CfEstimator *est);

/**
 * Estimates the outcome under arm `x_prime` for a unit with covariates
 * `z` (length `m`) that received arm `x` and showed outcome `y`.
 *
 * # Safety
 * `est` must be a live handle, `z` must hold `m` values and `out` must be valid.
 */
enum CfStatus cf_estimate(const struct CfEstimator *est,
                          double x,
                          const double *z,
                          size_t m,
                          double y,
                          double x_prime,
                          struct CfEstimate *out);

/**
 * Minimizes `sum_k a_k |knots_k - t| + b t` exactly.
 *
 * # Safety
 * `knots` and `a` must hold `len` values and `out` must be valid.
 */
enum CfStatus cf_minimize_profile(const double *knots,
                                  const double *a,
                                  size_t len,
                                  double b,
                                  struct CfEstimate *out);

/**
 * Kendall rank correlation of two equal-length samples.
 *
 * # Safety
 * `xs` and `ys` must hold `len` values and `out` must be valid.
 */
enum CfStatus cf_kendall(const double *xs, const double *ys, size_t len, struct CfRankReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RANKCF_H */
