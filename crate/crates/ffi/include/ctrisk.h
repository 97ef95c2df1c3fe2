#ifndef CTRISK_H
#define CTRISK_H

#include <stddef.h>
#include <stdint.h>

/**
 * Outcome type passed to [`ctrisk_dataset_new`].
 */
typedef enum CtriskOutcome {
  /**
   * Binary if every outcome is 0 or 1, continuous otherwise.
   */
  CTRISK_OUTCOME_INFER = 0,
  CTRISK_OUTCOME_BINARY = 1,
  CTRISK_OUTCOME_CONTINUOUS = 2,
} CtriskOutcome;

typedef enum CtriskStatus {
  CTRISK_STATUS_OK = 0,
  CTRISK_STATUS_INVALID_PARAMETER = 1,
  CTRISK_STATUS_PARSE = 2,
  CTRISK_STATUS_SOLVER = 3,
  CTRISK_STATUS_EVALUATION = 4,
  CTRISK_STATUS_ESTIMATION = 5,
  CTRISK_STATUS_IO = 6,
  CTRISK_STATUS_NULL_POINTER = 7,
  CTRISK_STATUS_PANIC = 8,
} CtriskStatus;

/**
 * Opaque dataset handle.
 */
typedef struct CtriskDataset CtriskDataset;

/**
 * Tuning and cross-fitting settings; start from [`ctrisk_params_default`].
 */
typedef struct CtriskParams {
  double t;
  double epsilon;
  double h;
  double h0;
  double h1;
  double alpha;
  uint32_t quad_nodes;
  /**
   * Kernel truncation radius in bandwidths.
   */
  double window;
  uint32_t folds;
  uint64_t seed;
  /**
   * Constant `P(A = 1)`; ignored when `propensity_spec` is set.
   */
  double known_propensity;
  /**
   * Logistic propensity features such as `"1,b,x1"`, or NULL.
   */
  const char *propensity_spec;
  /**
   * Conditional marker density features, or NULL for `"1,b,a,x1,x2^2"`.
   */
  const char *density_spec;
  /**
   * Outcome regression features, or NULL for `"1,x2,x3,s,a,b"`.
   */
  const char *outcome_spec;
} CtriskParams;

typedef struct CtriskStwcrReport {
  double tau_num_hat;
  double tau_den_hat;
  double tau_hat;
  double sigma1_sq_hat;
  double se;
  double ci_lo;
  double ci_hi;
  uint64_t n;
  uint64_t density_floor_hits;
  uint64_t degenerate_folds;
  uint64_t warning_count;
} CtriskStwcrReport;

typedef struct CtriskStwcrveReport {
  double tau_num_hat;
  double tau_den_hat;
  double rho_hat;
  double delta_hat;
  double sigma2log_sq_hat;
  double rho_lo;
  double rho_hi;
  double delta_lo;
  double delta_hi;
  /**
   * Nonzero when the interval was formed on the direct scale.
   */
  uint8_t direct_scale_ci;
  double sigma2_sq_hat;
  uint64_t n;
  uint64_t density_floor_hits;
  uint64_t degenerate_folds;
  uint64_t warning_count;
} CtriskStwcrveReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *ctrisk_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ctrisk_version(void);

struct CtriskParams ctrisk_params_default(void);

/**
 * Builds a dataset from column arrays of length `n`; `x` is row-major `n × p`
 * and its columns are named `x1..xp`.
 *
 * # Safety
 * Every non-null pointer must reference the stated number of elements; `out` must be writable.
 */
enum CtriskStatus ctrisk_dataset_new(const double *y,
                                     const uint8_t *a,
                                     const double *s,
                                     const double *b,
                                     const double *x,
                                     size_t n,
                                     size_t p,
                                     enum CtriskOutcome outcome,
                                     struct CtriskDataset **out);

/**
 * Loads a CSV with columns `y,a,s,b,x1..xp`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CtriskStatus ctrisk_dataset_from_csv(const char *path, struct CtriskDataset **out);

/**
 * Number of observations, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
size_t ctrisk_dataset_len(const struct CtriskDataset *ds);

/**
 * Releases a dataset; NULL is ignored.
 *
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void ctrisk_dataset_free(struct CtriskDataset *ds);

/**
 * Cross-fitted STWCR(a, s).
 *
 * # Safety
 * `ds` must be a live handle, `params` and `out` valid pointers.
 */
enum CtriskStatus ctrisk_estimate_stwcr(const struct CtriskDataset *ds,
                                        const struct CtriskParams *params,
                                        uint8_t a,
                                        double s,
                                        struct CtriskStwcrReport *out);

/**
 * Cross-fitted STWCRVE(a1, a0, s1, s0).
 *
 * # Safety
 * `ds` must be a live handle, `params` and `out` valid pointers.
 */
enum CtriskStatus ctrisk_estimate_stwcrve(const struct CtriskDataset *ds,
                                          const struct CtriskParams *params,
                                          uint8_t a1,
                                          uint8_t a0,
                                          double s1,
                                          double s0,
                                          struct CtriskStwcrveReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTRISK_H */
