#ifndef MPCP_H
#define MPCP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes returned by every fallible function.
typedef enum MpcpStatus {
  MPCP_STATUS_OK = 0,
  // A required pointer argument was null.
  MPCP_STATUS_NULL_POINTER = 1,
  // Shapes, indices or configuration values were rejected.
  MPCP_STATUS_INVALID_ARGUMENT = 2,
  // Reading or writing a file failed, or a file was malformed.
  MPCP_STATUS_IO = 3,
  // Numerical failure such as a zero-norm tensor.
  MPCP_STATUS_NUMERICAL = 4,
  // An internal panic was caught at the boundary.
  MPCP_STATUS_INTERNAL = 5,
} MpcpStatus;

// Number format selector; integer formats take their width separately.
typedef enum MpcpFormat {
  MPCP_FORMAT_INT = 0,
  MPCP_FORMAT_FP16 = 1,
  MPCP_FORMAT_FP32 = 2,
  MPCP_FORMAT_FP64 = 3,
} MpcpFormat;

// How a decomposition run ended.
typedef enum MpcpRunOutcome {
  MPCP_RUN_OUTCOME_CONVERGED = 0,
  MPCP_RUN_OUTCOME_MAX_ITERS = 2,
  MPCP_RUN_OUTCOME_DIVERGED = 3,
} MpcpRunOutcome;

// Run configuration handle.
typedef struct MpcpConfig MpcpConfig;

// CP factor matrices handle.
typedef struct MpcpFactors MpcpFactors;

// Dense tensor handle.
typedef struct MpcpTensor MpcpTensor;

// Convergence trace handle.
typedef struct MpcpTrace MpcpTrace;

typedef struct MpcpConvexityReport {
  size_t rows;
  size_t cols;
  double sigma_min;
  double sigma_max;
  double lambda_min;
  // 1 when the Jacobian has full column rank at the tolerance.
  int32_t full_rank;
} MpcpConvexityReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`) and returns the full message length in bytes.
size_t mpcp_last_error_message(char *buf, size_t len);

// Creates a tensor from `order` dimensions and a row-major buffer of
// `prod(dims)` doubles.
enum MpcpStatus mpcp_tensor_new(const size_t *dims,
                                size_t order,
                                const double *data,
                                struct MpcpTensor **out);

enum MpcpStatus mpcp_tensor_read(const char *path, struct MpcpTensor **out);

// Writes a tensor file with a 64-bit float payload.
enum MpcpStatus mpcp_tensor_write(const struct MpcpTensor *t, const char *path);

size_t mpcp_tensor_order(const struct MpcpTensor *t);

size_t mpcp_tensor_len(const struct MpcpTensor *t);

// Copies the dimensions into `dims`, which must hold `mpcp_tensor_order`
// entries.
enum MpcpStatus mpcp_tensor_dims(const struct MpcpTensor *t, size_t *dims, size_t len);

// Copies the row-major entries into `data`, which must hold
// `mpcp_tensor_len` doubles.
enum MpcpStatus mpcp_tensor_data(const struct MpcpTensor *t, double *data, size_t len);

void mpcp_tensor_free(struct MpcpTensor *t);

// Creates factors for a tensor of the given dimensions. `data` holds the
// factor matrices back to back, each `dims[k] x rank` in row-major order.
enum MpcpStatus mpcp_factors_new(const size_t *dims,
                                 size_t order,
                                 size_t rank,
                                 const double *data,
                                 struct MpcpFactors **out);

enum MpcpStatus mpcp_factors_read(const char *path, struct MpcpFactors **out);

enum MpcpStatus mpcp_factors_write(const struct MpcpFactors *f, const char *path);

size_t mpcp_factors_order(const struct MpcpFactors *f);

size_t mpcp_factors_rank(const struct MpcpFactors *f);

// Copies factor `mode` (row-major, `rows x rank`) into `data`.
enum MpcpStatus mpcp_factors_get(const struct MpcpFactors *f,
                                 size_t mode,
                                 double *data,
                                 size_t len);

void mpcp_factors_free(struct MpcpFactors *f);

enum MpcpStatus mpcp_cp_reconstruct(const struct MpcpFactors *f, struct MpcpTensor **out);

enum MpcpStatus mpcp_relative_error(const struct MpcpTensor *t,
                                    const struct MpcpFactors *f,
                                    double *out);

// Default two-stage configuration for the given dimensions and rank: FP16
// staging, INT8 products, SignSGD then SGD.
enum MpcpStatus mpcp_config_new(const size_t *dims,
                                size_t order,
                                size_t rank,
                                struct MpcpConfig **out);

enum MpcpStatus mpcp_config_set_seed(struct MpcpConfig *cfg, uint64_t seed);

// Staging quantizer with a fixed scale.
enum MpcpStatus mpcp_config_set_q1(struct MpcpConfig *cfg,
                                   enum MpcpFormat format,
                                   uint32_t bits,
                                   double scale);

// Product quantizer. Integer formats use the automatic scale
// `max|X| / divisor`; a non-positive divisor selects the default for the
// width. Float formats use unit scale. `stochastic` selects the rounding.
enum MpcpStatus mpcp_config_set_q2(struct MpcpConfig *cfg,
                                   enum MpcpFormat format,
                                   uint32_t bits,
                                   int32_t stochastic,
                                   double divisor);

enum MpcpStatus mpcp_config_set_sign_stage(struct MpcpConfig *cfg,
                                           double alpha0,
                                           double eta,
                                           size_t decay_interval,
                                           double epsilon,
                                           size_t max_iters);

// Starts SGD directly from the random initialization.
enum MpcpStatus mpcp_config_skip_sign_stage(struct MpcpConfig *cfg);

enum MpcpStatus mpcp_config_set_sgd_stage(struct MpcpConfig *cfg,
                                          double alpha0,
                                          double eta,
                                          size_t decay_interval,
                                          double epsilon,
                                          size_t max_iters);

enum MpcpStatus mpcp_config_set_sample_sizes(struct MpcpConfig *cfg,
                                             const size_t *sizes,
                                             size_t order);

enum MpcpStatus mpcp_config_set_init_max(struct MpcpConfig *cfg, double init_max);

enum MpcpStatus mpcp_config_set_eval_stride(struct MpcpConfig *cfg, size_t stride);

void mpcp_config_free(struct MpcpConfig *cfg);

// Runs the decomposition. On `MPCP_STATUS_OK` the fitted factors and trace
// are returned together with the outcome; a diverged run still returns its
// last factors and partial trace.
enum MpcpStatus mpcp_run(const struct MpcpTensor *t,
                         const struct MpcpConfig *cfg,
                         struct MpcpFactors **out_factors,
                         struct MpcpTrace **out_trace,
                         enum MpcpRunOutcome *out_outcome);

size_t mpcp_trace_len(const struct MpcpTrace *tr);

// Iteration at which SGD took over, or -1 if the run never reached it.
int64_t mpcp_trace_switch_iter(const struct MpcpTrace *tr);

// Reads record `index`. `stage` receives 0 for SignSGD and 1 for SGD; any
// output pointer may be null.
enum MpcpStatus mpcp_trace_get(const struct MpcpTrace *tr,
                               size_t index,
                               size_t *iter,
                               int32_t *stage,
                               double *alpha,
                               double *rel_error,
                               double *wall_ms);

// Writes the trace as CSV.
enum MpcpStatus mpcp_trace_write(const struct MpcpTrace *tr, const char *path);

void mpcp_trace_free(struct MpcpTrace *tr);

// Normalized cost `(1 + b m / 32) / (2 + 2m)` of the FP16/INT(b) gradient.
enum MpcpStatus mpcp_cost_model(size_t order, uint32_t bits, double *out);

enum MpcpStatus mpcp_rank_bound(const size_t *dims, size_t order, size_t *out_r3, size_t *out_rm);

enum MpcpStatus mpcp_check_convexity(const struct MpcpFactors *f,
                                     double tol,
                                     struct MpcpConvexityReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPCP_H */
