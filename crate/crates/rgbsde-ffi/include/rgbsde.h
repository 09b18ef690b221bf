/* C interface to the rgbsde reflected-BSDE solver. Generated; do not edit. */

#ifndef RGBSDE_H
#define RGBSDE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code for every fallible entry point.
 */
enum RgbsdeStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : uint32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  RGBSDE_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  RGBSDE_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  RGBSDE_STATUS_INVALID_UTF8 = 2,
  /**
   * The named problem is not in the catalog.
   */
  RGBSDE_STATUS_UNKNOWN_PROBLEM = 3,
  /**
   * Configuration or parameters failed validation.
   */
  RGBSDE_STATUS_INVALID_ARGUMENT = 4,
  /**
   * The solve started but broke down numerically.
   */
  RGBSDE_STATUS_NUMERIC_FAILURE = 5,
  /**
   * The caller's buffer cannot hold the result.
   */
  RGBSDE_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * An index was outside the stored solution.
   */
  RGBSDE_STATUS_OUT_OF_RANGE = 7,
  /**
   * An internal invariant failed; the handle state is unspecified.
   */
  RGBSDE_STATUS_PANIC = 8,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum RgbsdeStatus RgbsdeStatus;
#else
typedef uint32_t RgbsdeStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque problem handle.
 */
typedef struct RgbsdeProblem RgbsdeProblem;

/**
 * Opaque solution handle.
 */
typedef struct RgbsdeSolution RgbsdeSolution;

/**
 * Solve parameters. Zero `paths` or `steps` means the problem default.
 */
typedef struct {
  uint64_t seed;
  size_t paths;
  size_t steps;
  /**
   * One of the `RgbsdeMethod` values.
   */
  uint32_t method;
  /**
   * Penalty strength; only read when `method` selects penalization.
   */
  double penalty;
} RgbsdeSolveParams;

/**
 * Summary of a solved problem.
 */
typedef struct {
  /**
   * Mean initial value across paths.
   */
  double y0_mean;
  /**
   * Regression-residual standard error of `y0_mean`.
   */
  double y0_se;
  /**
   * Mean accumulated push `K_T`.
   */
  double k_t_mean;
  /**
   * Worst pathwise `|sum (Y - S) dK|`; 0 exactly for hard reflection.
   */
  double skorokhod_score;
  size_t paths;
  size_t steps;
} RgbsdeStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message for the calling thread into `buf` as a
 * NUL-terminated string (truncating if needed) and returns the full length
 * in bytes including the terminator; 0 means no pending error. `buf` may be
 * null to query the length alone.
 */
size_t rgbsde_last_error(char *buf, size_t cap);

/**
 * Number of named problems in the catalog.
 */
size_t rgbsde_catalog_count(void);

/**
 * Copies the name of catalog entry `index` into `buf` (NUL-terminated).
 */
RgbsdeStatus rgbsde_catalog_name(size_t index, char *buf, size_t cap);

/**
 * Opens a catalog problem by name.
 */
RgbsdeStatus rgbsde_problem_open(const char *name, RgbsdeProblem **out);

/**
 * Builds a problem from configuration text (the same TOML format the
 * command line reads; the `[run]` section is ignored here).
 */
RgbsdeStatus rgbsde_problem_from_toml(const char *text, RgbsdeProblem **out);

/**
 * Releases a problem handle; null is a no-op.
 */
void rgbsde_problem_free(RgbsdeProblem *problem);

/**
 * Default parameters: seed 42, problem-default paths and steps, hard
 * reflection.
 */
RgbsdeSolveParams rgbsde_solve_params_default(void);

/**
 * Simulates the forward paths and runs the backward solve. `params` may be
 * null for defaults.
 */
RgbsdeStatus rgbsde_solve(const RgbsdeProblem *problem,
                          const RgbsdeSolveParams *params,
                          RgbsdeSolution **out);

/**
 * Copies the solve summary into `out`.
 */
RgbsdeStatus rgbsde_solution_stats(const RgbsdeSolution *solution, RgbsdeStats *out);

/**
 * Value surface lookup: `Y` for `path` at time node `node`
 * (0 <= node <= steps).
 */
RgbsdeStatus rgbsde_solution_value(const RgbsdeSolution *solution,
                                   size_t path,
                                   size_t node,
                                   double *out);

/**
 * Releases a solution handle; null is a no-op.
 */
void rgbsde_solution_free(RgbsdeSolution *solution);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RGBSDE_H */
