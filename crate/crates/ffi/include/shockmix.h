#ifndef SHOCKMIX_H
#define SHOCKMIX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GsStatus {
  GS_STATUS_OK = 0,
  GS_STATUS_NULL_POINTER = 1,
  GS_STATUS_INVALID_ARGUMENT = 2,
  GS_STATUS_CONFIG = 3,
  GS_STATUS_NUMERICAL = 4,
  GS_STATUS_CLUSTERING = 5,
  GS_STATUS_IO = 6,
  GS_STATUS_BUFFER_TOO_SMALL = 7,
  GS_STATUS_PANIC = 8,
} GsStatus;

/**
 * Fitted Gaussian mixture, components sorted by centroid distance to the origin.
 */
typedef struct GsMixture GsMixture;

/**
 * Solver state for one case.
 */
typedef struct GsSolver GsSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *gs_last_error(void);

/**
 * Smooth sensor ramp: 0 below `s0 - ds`, 1 above `s0 + ds`.
 */
double gs_sensor_ramp(double raw, double s0, double ds);

/**
 * Builds a solver from a TOML case description.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum GsStatus gs_solver_new(const char *config_toml, struct GsSolver **out);

/**
 * # Safety
 * `solver` must come from [`gs_solver_new`] and not have been freed. Null is ignored.
 */
void gs_solver_free(struct GsSolver *solver);

/**
 * One step of length `dt`.
 *
 * # Safety
 * `solver` must be a live handle.
 */
enum GsStatus gs_solver_step(struct GsSolver *solver, double dt);

/**
 * `steps` steps of the configured length.
 *
 * # Safety
 * `solver` must be a live handle.
 */
enum GsStatus gs_solver_advance(struct GsSolver *solver, size_t steps);

/**
 * # Safety
 * `solver` must be a live handle; outputs must be writable.
 */
enum GsStatus gs_solver_time(struct GsSolver *solver, double *time, size_t *step);

/**
 * Number of solution nodes; field buffers hold 4 values per node, coordinates 2.
 *
 * # Safety
 * `solver` must be a live handle; `out` must be writable.
 */
enum GsStatus gs_solver_num_nodes(struct GsSolver *solver, size_t *out);

/**
 * Conservative state `(rho, rho u, rho v, rho E)` of every node, element-major.
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum GsStatus gs_solver_field(struct GsSolver *solver, double *buf, size_t len);

/**
 * `(x, y)` of every node, in field order.
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum GsStatus gs_solver_coordinates(struct GsSolver *solver, double *buf, size_t len);

/**
 * Nodal shock sensor in `[0, 1]` used for the latest step.
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum GsStatus gs_solver_sensor(struct GsSolver *solver, double *buf, size_t len);

/**
 * Smallest density and pressure seen over all steps so far.
 *
 * # Safety
 * `solver` must be a live handle; outputs must be writable.
 */
enum GsStatus gs_solver_minima(struct GsSolver *solver, double *rho, double *p);

/**
 * Writes the current state as a snapshot file.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum GsStatus gs_solver_write_snapshot(struct GsSolver *solver, const char *path);

/**
 * Cold-start fit (k-means, then EM) of `k` components. With `normalize`
 * each column is min-max scaled to `[0, 1]` first.
 *
 * # Safety
 * `data` must hold `rows * cols` doubles; `out` must be writable.
 */
enum GsStatus gs_mixture_fit(const double *data,
                             size_t rows,
                             size_t cols,
                             bool normalize,
                             size_t k,
                             uint64_t seed,
                             size_t max_iters,
                             double epsilon,
                             double tolerance,
                             struct GsMixture **out);

/**
 * # Safety
 * `mixture` must come from [`gs_mixture_fit`] and not have been freed. Null is ignored.
 */
void gs_mixture_free(struct GsMixture *mixture);

/**
 * Surviving component count (deletion can leave fewer than requested),
 * feature dimension, EM iterations and final log-likelihood.
 *
 * # Safety
 * `mixture` must be a live handle; outputs must be writable.
 */
enum GsStatus gs_mixture_info(struct GsMixture *mixture,
                              size_t *components,
                              size_t *dim,
                              size_t *iterations,
                              double *log_likelihood);

/**
 * Weight, mean (`dim` values) and row-major covariance (`dim * dim`) of component `j`.
 *
 * # Safety
 * `mean` and `cov` must hold `dim` and `dim * dim` doubles.
 */
enum GsStatus gs_mixture_component(struct GsMixture *mixture,
                                   size_t j,
                                   double *weight,
                                   double *mean,
                                   double *cov);

/**
 * Log-likelihood, AIC and BIC of the mixture on a point set.
 *
 * # Safety
 * `data` must hold `rows * cols` doubles; outputs must be writable.
 */
enum GsStatus gs_mixture_metrics(struct GsMixture *mixture,
                                 const double *data,
                                 size_t rows,
                                 size_t cols,
                                 bool normalize,
                                 double *log_likelihood,
                                 double *aic,
                                 double *bic);

/**
 * Per-point sensor value: rank of the most responsible component over `K - 1`.
 *
 * # Safety
 * `data` must hold `rows * cols` doubles and `out` `rows` doubles.
 */
enum GsStatus gs_mixture_sensor(struct GsMixture *mixture,
                                const double *data,
                                size_t rows,
                                size_t cols,
                                bool normalize,
                                double *out);

/**
 * Fits every `K` in `k_min..=k_max` and writes the BIC values to `bic`
 * (`k_max - k_min + 1` entries) and the minimizing `K` to `best_k`.
 *
 * # Safety
 * `data` must hold `rows * cols` doubles and `bic` `len` doubles.
 */
enum GsStatus gs_select_clusters(const double *data,
                                 size_t rows,
                                 size_t cols,
                                 bool normalize,
                                 size_t k_min,
                                 size_t k_max,
                                 uint64_t seed,
                                 size_t max_iters,
                                 double epsilon,
                                 double tolerance,
                                 double *bic,
                                 size_t len,
                                 size_t *best_k);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHOCKMIX_H */
