#ifndef PFSEARCH_H
#define PFSEARCH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PfsStatus {
  PFS_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8 or malformed JSON.
   */
  PFS_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Input rejected by validation.
   */
  PFS_STATUS_VALIDATION = 2,
  /**
   * Numerical failure such as non-convergence or a degenerate system.
   */
  PFS_STATUS_NUMERICAL = 3,
  /**
   * Dimension above the root oracle's limit.
   */
  PFS_STATUS_REFUSED = 4,
  PFS_STATUS_PANIC = 5,
} PfsStatus;

/**
 * Opaque normalized system.
 */
typedef struct PfsNormalized PfsNormalized;

/**
 * Opaque quadric system.
 */
typedef struct PfsSystem PfsSystem;

typedef struct PfsScalingDiagnostics {
  double trace_distance;
  double summation_distance;
  double gradient_norm;
  size_t iterations;
  bool converged;
} PfsScalingDiagnostics;

typedef struct PfsRewardOptions {
  double delta;
  size_t num_points;
  size_t num_tuples;
  /**
   * Annulus tolerance; zero or negative selects the automatic value.
   */
  double epsilon;
  uint64_t seed;
  size_t workers;
} PfsRewardOptions;

typedef struct PfsRewardResult {
  double value;
  double std_error;
  double log_value;
  size_t accepted_points;
  bool degenerate;
  bool not_converged;
} PfsRewardResult;

typedef struct PfsBaseline {
  double expected_count;
  double absdet_projected;
  double sphere_area;
  double log_gaussian_tail_moment;
} PfsBaseline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *pfs_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *pfs_version(void);

/**
 * Builds a system from `dim` row-major `dim x dim` factors laid out back to
 * back (`dim^3` values) and `dim` right-hand sides.
 *
 * # Safety
 * `factors` must point to `dim^3` doubles, `rhs` to `dim` doubles and
 * `out_system` to writable storage for one pointer.
 */
enum PfsStatus pfs_system_new(size_t dim,
                              const double *factors,
                              const double *rhs,
                              struct PfsSystem **out_system);

/**
 * Parses `{"dim": n, "factors": [...], "rhs": [...]}`.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out_system` writable.
 */
enum PfsStatus pfs_system_from_json(const char *json, struct PfsSystem **out_system);

/**
 * Serializes a system; release the string with [`pfs_string_free`].
 *
 * # Safety
 * `system` must be a live handle and `out_json` writable.
 */
enum PfsStatus pfs_system_to_json(const struct PfsSystem *system, char **out_json);

/**
 * Gaussian factors with standard deviation `sigma` and unit right-hand sides.
 *
 * # Safety
 * `out_system` must be writable.
 */
enum PfsStatus pfs_system_random_gaussian(size_t n,
                                          double sigma,
                                          uint64_t seed,
                                          struct PfsSystem **out_system);

/**
 * Dimension of a system, or 0 for a null handle.
 *
 * # Safety
 * `system` must be null or a live handle.
 */
size_t pfs_system_dim(const struct PfsSystem *system);

/**
 * # Safety
 * `system` must be null or a handle not yet freed.
 */
void pfs_system_free(struct PfsSystem *system);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void pfs_string_free(char *s);

/**
 * Scales a system to unit-trace factors summing to the identity.
 *
 * # Safety
 * `system` must be a live handle and `out_normalized` writable.
 */
enum PfsStatus pfs_normalize(const struct PfsSystem *system,
                             double gradient_tolerance,
                             size_t max_iterations,
                             size_t corrector_steps,
                             struct PfsNormalized **out_normalized);

/**
 * # Safety
 * `normalized` must be a live handle and `out_diagnostics` writable.
 */
enum PfsStatus pfs_normalized_diagnostics(const struct PfsNormalized *normalized,
                                          struct PfsScalingDiagnostics *out_diagnostics);

/**
 * Copies the `dim` weights (summing to `dim`) into `out_weights`.
 *
 * # Safety
 * `normalized` must be a live handle and `out_weights` hold `len` doubles.
 */
enum PfsStatus pfs_normalized_weights(const struct PfsNormalized *normalized,
                                      double *out_weights,
                                      size_t len);

/**
 * # Safety
 * `normalized` must be null or a handle not yet freed.
 */
void pfs_normalized_free(struct PfsNormalized *normalized);

/**
 * Default reward options.
 */
struct PfsRewardOptions pfs_reward_options_default(void);

/**
 * Normalizes `system` and estimates its expected real solution count.
 *
 * # Safety
 * `system` and `options` must be valid and `out_result` writable.
 */
enum PfsStatus pfs_reward(const struct PfsSystem *system,
                          const struct PfsRewardOptions *options,
                          struct PfsRewardResult *out_result);

/**
 * Counts real solutions. `starts == 0` selects the default start count.
 *
 * # Safety
 * `system` must be a live handle; `out_count` and `out_exhaustive` writable.
 */
enum PfsStatus pfs_count(const struct PfsSystem *system,
                         size_t starts,
                         uint64_t seed,
                         size_t max_dim,
                         size_t *out_count,
                         bool *out_exhaustive);

/**
 * Closed-form Gaussian averages for dimension `n`.
 *
 * # Safety
 * `out_baseline` must be writable.
 */
enum PfsStatus pfs_baseline(size_t n, struct PfsBaseline *out_baseline);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PFSEARCH_H */
