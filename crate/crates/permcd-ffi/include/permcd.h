#ifndef PERMCD_H
#define PERMCD_H

/* This file is generated by cbindgen from permcd-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * How the diagonal weight vector is generated.
 */
typedef enum {
  /**
   * Evenly spaced weights from 0 to 1.
   */
  PERMCD_DIAGONAL_MODE_LINSPACE = 0,
  /**
   * Seeded uniform draws rescaled to attain 0 and 1.
   */
  PERMCD_DIAGONAL_MODE_SEEDED_UNIFORM = 1,
} PermcdDiagonalMode;

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum {
  PERMCD_STATUS_OK = 0,
  /**
   * A pointer was null or a parameter was outside its domain.
   */
  PERMCD_STATUS_INVALID_ARGUMENT = 1,
  /**
   * A computation lost too much accuracy to be trusted.
   */
  PERMCD_STATUS_NUMERICAL_ERROR = 2,
  /**
   * A statistical estimate could not be formed.
   */
  PERMCD_STATUS_ESTIMATION_ERROR = 3,
  PERMCD_STATUS_INTERNAL_ERROR = 4,
} PermcdStatus;

/**
 * Coordinate selection rule.
 */
typedef enum {
  PERMCD_STRATEGY_CYCLIC = 0,
  PERMCD_STRATEGY_UNIFORM_RANDOM = 1,
  PERMCD_STRATEGY_RANDOM_PERMUTATION = 2,
  PERMCD_STRATEGY_DIAGONAL_WEIGHTED = 3,
} PermcdStrategy;

/**
 * Opaque handle to a structured Hessian.
 */
typedef struct PermcdHessian PermcdHessian;

/**
 * Opaque handle to a recorded objective trace.
 */
typedef struct PermcdTrace PermcdTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message on this thread into `buf` (truncated,
 * always NUL-terminated when `cap > 0`) and returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must point to at least `cap` writable bytes, or be null with
 * `cap == 0`.
 */
uintptr_t permcd_last_error_message(char *buf, uintptr_t cap);

/**
 * Builds the structured matrix `delta*I + (1-delta)*ones*ones' +
 * eps*diag(d)` with `d` generated per `mode` and writes a handle to
 * `out`. Pass `eps = 0` for the pure spike form.
 *
 * # Safety
 * `out` must be a valid pointer to a pointer slot.
 */
PermcdStatus permcd_hessian_create(uintptr_t n,
                                   double delta,
                                   double eps,
                                   PermcdDiagonalMode mode,
                                   uint64_t seed,
                                   PermcdHessian **out);

/**
 * As `permcd_hessian_create`, with caller-supplied weights that must
 * already satisfy `min(d) = 0`, `max(d) = 1`.
 *
 * # Safety
 * `d` must point to `len` readable doubles; `out` must be valid.
 */
PermcdStatus permcd_hessian_create_explicit(uintptr_t n,
                                            double delta,
                                            double eps,
                                            const double *d,
                                            uintptr_t len,
                                            PermcdHessian **out);

/**
 * Frees a Hessian handle. Null is ignored.
 *
 * # Safety
 * `h` must be a handle from `permcd_hessian_create*`, not yet freed.
 */
void permcd_hessian_free(PermcdHessian *h);

/**
 * Evaluates `0.5 * x' A x` in O(n).
 *
 * # Safety
 * `h` must be a live handle; `x` must point to `len` readable doubles;
 * `out` must be valid.
 */
PermcdStatus permcd_hessian_quad_value(const PermcdHessian *h,
                                       const double *x,
                                       uintptr_t len,
                                       double *out);

/**
 * Runs `epochs` epochs of exact-line-search coordinate descent from
 * `x0` under the given ordering strategy and writes a trace handle.
 * The trace is truncated (and flagged) once the objective falls below
 * `f_floor`; pass `f_floor <= 0` for the default floor of 1e-280.
 *
 * # Safety
 * `h` must be a live handle; `x0` must point to `len` readable
 * doubles; `out` must be valid.
 */
PermcdStatus permcd_run_epochs(const PermcdHessian *h,
                               const double *x0,
                               uintptr_t len,
                               PermcdStrategy strategy,
                               uintptr_t epochs,
                               uint64_t seed,
                               double f_floor,
                               PermcdTrace **out);

/**
 * Number of recorded objective values (epochs + 1 when not truncated).
 *
 * # Safety
 * `t` must be a live trace handle.
 */
uintptr_t permcd_trace_len(const PermcdTrace *t);

/**
 * Whether the run stopped early at the objective floor.
 *
 * # Safety
 * `t` must be a live trace handle.
 */
bool permcd_trace_truncated(const PermcdTrace *t);

/**
 * Copies up to `cap` objective values into `buf`, returning the number
 * copied. `fvals[0]` is `f(x0)`.
 *
 * # Safety
 * `t` must be a live trace handle; `buf` must point to `cap` writable
 * doubles.
 */
uintptr_t permcd_trace_fvals(const PermcdTrace *t, double *buf, uintptr_t cap);

/**
 * Frees a trace handle. Null is ignored.
 *
 * # Safety
 * `t` must be a handle from `permcd_run_epochs`, not yet freed.
 */
void permcd_trace_free(PermcdTrace *t);

/**
 * Geometric-mean per-epoch rate over the final `window` epochs of a
 * trace.
 *
 * # Safety
 * `t` must be a live trace handle; `out` must be valid.
 */
PermcdStatus permcd_observed_rate(const PermcdTrace *t, uintptr_t window, double *out);

/**
 * Per-epoch rate bound for uniform random selection implied by the
 * sharper complexity estimate: `(1 - 2d/(n(1+e+d)))^n`.
 */
double permcd_rcd_predicted_rate(uintptr_t n, double delta, double eps);

/**
 * Per-epoch rate from the basic strong-convexity analysis.
 */
double permcd_rcd_naive_rate(uintptr_t n, double delta, double eps);

/**
 * Per-epoch rate for diagonal-proportional sampling.
 */
double permcd_rcd_nonuniform_rate(uintptr_t n, double delta, double eps, double d_av);

/**
 * Worst-case per-epoch bound for cyclic order.
 */
double permcd_ccd_bound_suny(uintptr_t n, double delta, double eps);

/**
 * `rho(C)^2` for the cyclic epoch matrix. `warning` (optional) is set
 * when the independent cross-check did not converge and the dense
 * value was used alone.
 *
 * # Safety
 * `h` must be a live handle; `out` must be valid; `warning` may be
 * null.
 */
PermcdStatus permcd_ccd_spectral_rate(const PermcdHessian *h, double *out, bool *warning);

/**
 * Library build identifier as a static NUL-terminated string.
 */
const char *permcd_build_id(void);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PERMCD_H */
