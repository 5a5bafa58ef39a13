#ifndef RECENCY_H
#define RECENCY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RecencyStatus {
  RECENCY_STATUS_OK = 0,
  RECENCY_STATUS_NULL_POINTER = 1,
  RECENCY_STATUS_INVALID_ARGUMENT = 2,
  RECENCY_STATUS_DIMENSION_MISMATCH = 3,
  RECENCY_STATUS_NUMERICAL = 4,
  RECENCY_STATUS_SINGULAR = 5,
  RECENCY_STATUS_NO_COVARIANCE = 6,
  RECENCY_STATUS_PANIC = 7,
} RecencyStatus;

// Subjects ready for fitting.
typedef struct RecencyDataset RecencyDataset;

// A fitted model.
typedef struct RecencyFit RecencyFit;

// Model options. A NaN anchor means the parameter is estimated.
typedef struct RecencySpec {
  double fix_eta00;
  double fix_eta10;
  bool p0_one;
  bool extended;
} RecencySpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty when none.
// The pointer stays valid until the next failing call on the same thread.
const char *recency_last_error(void);

// Build a dataset of `n` subjects. `covariates` is row-major `n x p`;
// `s` is years since the last HIV test and `z[i]` is nonzero when that
// test was positive.
//
// # Safety
// Every array must hold `n` (or `n * p`) readable elements.
enum RecencyStatus recency_dataset_new(size_t n,
                                       size_t p,
                                       const double *covariates,
                                       const double *s,
                                       const uint8_t *z,
                                       const double *w,
                                       struct RecencyDataset **out);

// # Safety
// `dataset` must come from [`recency_dataset_new`] and not be used afterwards.
void recency_dataset_free(struct RecencyDataset *dataset);

// Fit the model. Weights must already sum to the number of subjects.
//
// # Safety
// `dataset` and `spec` must be valid pointers; `out` receives a new handle.
enum RecencyStatus recency_fit(const struct RecencyDataset *dataset,
                               const struct RecencySpec *spec,
                               struct RecencyFit **out);

// # Safety
// `fit` must come from [`recency_fit`] and not be used afterwards.
void recency_fit_free(struct RecencyFit *fit);

// Number of estimated parameters; 0 for a null handle.
//
// # Safety
// `fit` must be null or a live handle.
size_t recency_fit_n_free(const struct RecencyFit *fit);

// Name of free parameter `i`, owned by the handle; null when out of range.
//
// # Safety
// `fit` must be null or a live handle.
const char *recency_fit_param_name(const struct RecencyFit *fit, size_t i);

// Copy the free-parameter estimates into `buf` (length `len`, at least
// [`recency_fit_n_free`]).
//
// # Safety
// `buf` must hold `len` writable doubles.
enum RecencyStatus recency_fit_estimates(const struct RecencyFit *fit, double *buf, size_t len);

// Copy the row-major sandwich covariance (`k x k`, `k` free parameters).
//
// # Safety
// `buf` must hold `len` writable doubles.
enum RecencyStatus recency_fit_covariance(const struct RecencyFit *fit, double *buf, size_t len);

// Maximized log pseudo-likelihood; NaN for a null handle.
//
// # Safety
// `fit` must be null or a live handle.
double recency_fit_log_pl(const struct RecencyFit *fit);

// BIC of the fit; NaN for a null handle.
//
// # Safety
// `fit` must be null or a live handle.
double recency_fit_bic(const struct RecencyFit *fit);

// Whether the optimizer met the score tolerance.
//
// # Safety
// `fit` must be null or a live handle.
bool recency_fit_converged(const struct RecencyFit *fit);

// Probability of recent infection from covariates alone.
//
// # Safety
// `covariates` must hold `p` doubles; `out` must be writable.
enum RecencyStatus recency_fit_type1_risk(const struct RecencyFit *fit,
                                          const double *covariates,
                                          size_t p,
                                          double *out);

// Probability of recent infection given covariates, `s` and the last test
// result `z` (nonzero = positive).
//
// # Safety
// `covariates` must hold `p` doubles; `out` must be writable.
enum RecencyStatus recency_fit_type2_risk(const struct RecencyFit *fit,
                                          const double *covariates,
                                          size_t p,
                                          double s,
                                          uint8_t z,
                                          double *out);

// Weighted mean Type-2 risk over a dataset.
//
// # Safety
// Handles must be live; `out` must be writable.
enum RecencyStatus recency_fit_recency_rate(const struct RecencyFit *fit,
                                            const struct RecencyDataset *dataset,
                                            double *out);

// Incidence from prevalence, treatment coverage and the recency rate.
//
// # Safety
// `out` must be writable.
enum RecencyStatus recency_incidence(double p_hiv, double p_art, double e_y, double *out);

// Area under the ROC curve; `labels[i]` nonzero marks a positive.
//
// # Safety
// `scores` and `labels` must hold `n` elements; `out` must be writable.
enum RecencyStatus recency_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECENCY_H */
