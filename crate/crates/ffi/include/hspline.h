#ifndef HSPLINE_H
#define HSPLINE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. The nonzero codes mirror the CLI's exit codes.
 */
typedef enum HsStatus {
  HS_STATUS_OK = 0,
  HS_STATUS_NULL_POINTER = 1,
  HS_STATUS_INVALID_ARGUMENT = 2,
  HS_STATUS_DATA_ERROR = 3,
  HS_STATUS_NUMERICAL_ERROR = 4,
  HS_STATUS_PANIC = 5,
} HsStatus;

typedef enum HsPredictMethod {
  HS_PREDICT_METHOD_LOCAL_TPS = 0,
  HS_PREDICT_METHOD_LOCAL_LINEAR = 1,
  HS_PREDICT_METHOD_LOCAL_CONVEX = 2,
} HsPredictMethod;

/**
 * Sample points together with their estimated Hessian penalty.
 */
typedef struct HsHessian HsHessian;

/**
 * A fitted Euclidean thin-plate spline.
 */
typedef struct HsTpsModel HsTpsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a success.
 *
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *hs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hs_version(void);

/**
 * Estimates the Hessian penalty from `n` points with `ambient` coordinates each.
 *
 * # Safety
 * `points` must hold `n * ambient` doubles; `out` must be writable.
 */
enum HsStatus hs_hessian_build(const double *points,
                               size_t n,
                               size_t ambient,
                               size_t intrinsic_dim,
                               size_t k,
                               bool skip_degenerate,
                               struct HsHessian **out);

/**
 * # Safety
 * `h` must be null or a handle from [`hs_hessian_build`] not yet freed.
 */
void hs_hessian_free(struct HsHessian *h);

/**
 * Number of points, or 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t hs_hessian_len(const struct HsHessian *h);

/**
 * Number of points dropped as degenerate.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t hs_hessian_skipped(const struct HsHessian *h);

/**
 * `f^T H f` for a vector of `n` function values.
 *
 * # Safety
 * `f` must hold `n` doubles and `out` must be writable.
 */
enum HsStatus hs_hessian_quadratic_form(const struct HsHessian *h,
                                        const double *f,
                                        size_t n,
                                        double *out);

/**
 * Smoothing-spline fit with unit weights; `fitted` receives `n` values.
 *
 * # Safety
 * `y` and `fitted` must hold `n` doubles.
 */
enum HsStatus hs_fit(const struct HsHessian *h,
                     const double *y,
                     size_t n,
                     double lambda,
                     double *fitted);

/**
 * Weighted fit `(W + lambda H) g = W y`.
 *
 * # Safety
 * `y`, `w` and `fitted` must hold `n` doubles.
 */
enum HsStatus hs_fit_weighted(const struct HsHessian *h,
                              const double *y,
                              const double *w,
                              size_t n,
                              double lambda,
                              double *fitted);

/**
 * Robust fit by iterative reweighting.
 *
 * A `rho_scale` of zero or less selects the automatic robust scale.
 * `weights` and `iterations` may be null.
 *
 * # Safety
 * `y` and `fitted` (and `weights` when non-null) must hold `n` doubles.
 */
enum HsStatus hs_reweight_fit(const struct HsHessian *h,
                              const double *y,
                              size_t n,
                              double lambda,
                              size_t max_iter,
                              double tol,
                              double rho_scale,
                              double *fitted,
                              double *weights,
                              size_t *iterations);

/**
 * Leave-one-out cross-validation over `grid`.
 *
 * `scores[i]` receives the score of `grid[i]`, or NaN where leave-one-out is
 * undefined. `selected` receives the chosen lambda.
 *
 * # Safety
 * `y` must hold `n` doubles; `grid` and `scores` must hold `grid_len` doubles.
 */
enum HsStatus hs_cv_select(const struct HsHessian *h,
                           const double *y,
                           size_t n,
                           const double *grid,
                           size_t grid_len,
                           bool exact_refit,
                           double *scores,
                           double *selected);

/**
 * Recovered coordinates: `coords` receives `n * d` values, row-major.
 *
 * # Safety
 * `coords` must hold `n * d` doubles for `n` = [`hs_hessian_len`].
 */
enum HsStatus hs_null_embedding(const struct HsHessian *h, size_t d, double *coords);

/**
 * Predicts at `x_star` (one point of the build's ambient dimension) from
 * `fitted` values at the build points.
 *
 * # Safety
 * `fitted` must hold `n` doubles, `x_star` `ambient` doubles, and `out` be writable.
 */
enum HsStatus hs_predict(const struct HsHessian *h,
                         const double *fitted,
                         size_t n,
                         const double *x_star,
                         size_t ambient,
                         size_t k,
                         enum HsPredictMethod method,
                         double *out);

/**
 * Green's function of the thin-plate penalty in `d` dimensions; NaN when `d` is unsupported.
 */
double hs_green_kernel(double r, size_t d);

/**
 * Fits a thin-plate spline through `m` centers of dimension `dim`.
 *
 * # Safety
 * `centers` must hold `m * dim` doubles, `y` `m` doubles, and `out` be writable.
 */
enum HsStatus hs_tps_fit(const double *centers,
                         size_t m,
                         size_t dim,
                         const double *y,
                         double lambda,
                         struct HsTpsModel **out);

/**
 * Evaluates a thin-plate spline at one point of its dimension.
 *
 * # Safety
 * `x` must hold `dim` doubles and `out` be writable.
 */
enum HsStatus hs_tps_eval(const struct HsTpsModel *model, const double *x, size_t dim, double *out);

/**
 * # Safety
 * `model` must be null or a handle from [`hs_tps_fit`] not yet freed.
 */
void hs_tps_free(struct HsTpsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HSPLINE_H */
