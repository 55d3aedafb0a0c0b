#ifndef MDADAPT_H
#define MDADAPT_H

/* Generated by cbindgen from mdadapt-ffi; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of an FFI call.
 */
typedef enum MdadaptStatus {
  MDADAPT_STATUS_OK = 0,
  /**
   * Null pointer, malformed JSON, or inconsistent dimensions.
   */
  MDADAPT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Singular Hessian or non-finite arithmetic.
   */
  MDADAPT_STATUS_NUMERICAL = 2,
  /**
   * Filesystem failure while reading a checkpoint.
   */
  MDADAPT_STATUS_IO = 3,
} MdadaptStatus;

/**
 * Trained controller: decoded gains, the matching potential, and the
 * feature network.
 */
typedef struct MdadaptController MdadaptController;

/**
 * Standalone smoothed l^p potential.
 */
typedef struct MdadaptPotential MdadaptPotential;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mdadapt_version(void);

/**
 * Message for the most recent failure on this thread, empty if none.
 */
const char *mdadapt_last_error_message(void);

/**
 * Loads a controller from a meta-train checkpoint file. On success writes
 * a handle the caller must release with [`mdadapt_controller_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MdadaptStatus mdadapt_controller_from_checkpoint(const char *path,
                                                      struct MdadaptController **out);

/**
 * Same as [`mdadapt_controller_from_checkpoint`] but parses checkpoint
 * JSON the caller already holds in memory.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MdadaptStatus mdadapt_controller_from_json(const char *json, struct MdadaptController **out);

/**
 * Releases a controller handle. Null is a no-op.
 *
 * # Safety
 * `ctrl` must be null or a handle this library returned, not yet freed.
 */
void mdadapt_controller_free(struct MdadaptController *ctrl);

/**
 * Number of adaptation parameters d, or 0 for a null handle.
 *
 * # Safety
 * `ctrl` must be null or a live handle.
 */
size_t mdadapt_controller_dim(const struct MdadaptController *ctrl);

/**
 * Decoded Bregman exponent p, or NaN for a null handle.
 *
 * # Safety
 * `ctrl` must be null or a live handle.
 */
double mdadapt_controller_exponent(const struct MdadaptController *ctrl);

/**
 * Control input for the current state and adaptation estimate.
 *
 * `q`, `qd`, `q_r`, `qd_r`, `qdd_r`, and `u_out` point at 3 doubles;
 * `ahat` points at d doubles.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum MdadaptStatus mdadapt_control(const struct MdadaptController *ctrl,
                                   const double *q,
                                   const double *qd,
                                   const double *q_r,
                                   const double *qd_r,
                                   const double *qdd_r,
                                   const double *ahat,
                                   double *u_out);

/**
 * Time derivative of the adaptation estimate under the mirror-descent
 * law, for the caller's own integrator.
 *
 * `q`, `qd`, `q_r`, `qd_r` point at 3 doubles; `ahat` and `dahat_out`
 * point at d doubles.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum MdadaptStatus mdadapt_adaptation(const struct MdadaptController *ctrl,
                                      const double *q,
                                      const double *qd,
                                      const double *q_r,
                                      const double *qd_r,
                                      const double *ahat,
                                      double *dahat_out);

/**
 * Creates a standalone potential handle; release with
 * [`mdadapt_potential_free`].
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MdadaptStatus mdadapt_potential_new(double p, double epsilon, struct MdadaptPotential **out);

/**
 * Releases a potential handle. Null is a no-op.
 *
 * # Safety
 * `pot` must be null or a handle this library returned, not yet freed.
 */
void mdadapt_potential_free(struct MdadaptPotential *pot);

/**
 * psi(a) for a vector of d doubles.
 *
 * # Safety
 * `a` must point at d doubles and `out` at one.
 */
enum MdadaptStatus mdadapt_potential_value(const struct MdadaptPotential *pot,
                                           const double *a,
                                           size_t d,
                                           double *out);

/**
 * Gradient of psi, written to d doubles at `out`.
 *
 * # Safety
 * `a` and `out` must point at d doubles each.
 */
enum MdadaptStatus mdadapt_potential_grad(const struct MdadaptPotential *pot,
                                          const double *a,
                                          size_t d,
                                          double *out);

/**
 * Diagonal of the Hessian of psi, written to d doubles at `out`.
 *
 * # Safety
 * `a` and `out` must point at d doubles each.
 */
enum MdadaptStatus mdadapt_potential_hess_diag(const struct MdadaptPotential *pot,
                                               const double *a,
                                               size_t d,
                                               double *out);

/**
 * Bregman divergence d_psi(y || x) over vectors of d doubles.
 *
 * # Safety
 * `y` and `x` must point at d doubles each and `out` at one.
 */
enum MdadaptStatus mdadapt_potential_bregman(const struct MdadaptPotential *pot,
                                             const double *y,
                                             const double *x,
                                             size_t d,
                                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDADAPT_H */
