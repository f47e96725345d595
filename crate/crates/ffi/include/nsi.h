#ifndef NSI_H
#define NSI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum NsiStatus {
  NSI_STATUS_OK = 0,
  NSI_STATUS_NULL_POINTER = 1,
  NSI_STATUS_INVALID_ARGUMENT = 2,
  NSI_STATUS_IO = 3,
  NSI_STATUS_CSV = 4,
  NSI_STATUS_ROLE = 5,
  NSI_STATUS_VALIDATION = 6,
  NSI_STATUS_INSUFFICIENT_DATA = 7,
  NSI_STATUS_NUMERICAL = 8,
  NSI_STATUS_WEAK_INSTRUMENT = 9,
  NSI_STATUS_CONFIG = 10,
  NSI_STATUS_SCHEMA = 11,
  /*
   The estimate has no value for the requested quantity.
   */
  NSI_STATUS_UNAVAILABLE = 12,
  NSI_STATUS_PANIC = 99,
} NsiStatus;

/*
 Family of sieve dictionaries used for both the bridge and the instruments.
 */
typedef enum NsiBasisKind {
  NSI_BASIS_KIND_SERIES = 0,
  NSI_BASIS_KIND_KERNEL = 1,
  NSI_BASIS_KIND_TREE = 2,
} NsiBasisKind;

/*
 Opaque validated dataset.
 */
typedef struct NsiDataset NsiDataset;

/*
 Opaque fitted NSI estimate.
 */
typedef struct NsiEstimate NsiEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message describing the most recent failure on this thread, or null if
 none occurred. The pointer stays valid until the next failing call on the
 same thread.
 */
const char *nsi_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *nsi_version(void);

/*
 Loads a CSV file with a header row. Rows with missing values in any role
 column are dropped.

 # Safety
 String arguments must be valid NUL-terminated strings; the arrays must
 hold `n_measurements` / `n_treatments` such pointers; `out` must be
 writable.
 */
enum NsiStatus nsi_dataset_load_csv(const char *path,
                                    const char *benchmark,
                                    const char *const *measurements,
                                    size_t n_measurements,
                                    const char *const *treatments,
                                    size_t n_treatments,
                                    struct NsiDataset **out);

/*
 Builds a dataset from `n_columns` named columns of `n_rows` values each,
 stored column after column in `values`.

 # Safety
 `names` must hold `n_columns` valid strings and `values` must hold
 `n_columns * n_rows` doubles; role arguments as in
 [`nsi_dataset_load_csv`].
 */
enum NsiStatus nsi_dataset_from_columns(const char *const *names,
                                        const double *values,
                                        size_t n_columns,
                                        size_t n_rows,
                                        const char *benchmark,
                                        const char *const *measurements,
                                        size_t n_measurements,
                                        const char *const *treatments,
                                        size_t n_treatments,
                                        struct NsiDataset **out);

/*
 Number of units retained after validation.

 # Safety
 `dataset` must be a live handle and `out` writable.
 */
enum NsiStatus nsi_dataset_n(const struct NsiDataset *dataset, size_t *out);

/*
 Releases a dataset. Null is ignored.

 # Safety
 `dataset` must be null or a handle not yet freed.
 */
void nsi_dataset_free(struct NsiDataset *dataset);

/*
 Cross-fitted NSI estimate with `folds` folds using the given dictionary
 family. `efficient` selects efficient (non-zero) or identity (zero) GMM
 weighting.

 # Safety
 `dataset` must be a live handle and `out` writable.
 */
enum NsiStatus nsi_estimate(const struct NsiDataset *dataset,
                            enum NsiBasisKind basis,
                            size_t folds,
                            uint64_t seed,
                            int32_t efficient,
                            struct NsiEstimate **out);

/*
 Number of pooled coefficients.

 # Safety
 `estimate` must be a live handle and `out` writable.
 */
enum NsiStatus nsi_estimate_n_coefficients(const struct NsiEstimate *estimate, size_t *out);

/*
 Point estimate and standard error of coefficient `index`.

 # Safety
 `estimate` must be a live handle; `out_value` and `out_se` writable.
 */
enum NsiStatus nsi_estimate_coefficient(const struct NsiEstimate *estimate,
                                        size_t index,
                                        double *out_value,
                                        double *out_se);

/*
 Overidentification statistic and its degrees of freedom. Returns
 `Unavailable` when the estimate was pooled with identity weighting.

 # Safety
 `estimate` must be a live handle; `out_stat` and `out_df` writable.
 */
enum NsiStatus nsi_estimate_j_stat(const struct NsiEstimate *estimate,
                                   double *out_stat,
                                   size_t *out_df);

/*
 Pooled estimate serialized as JSON. Release with [`nsi_string_free`].

 # Safety
 `estimate` must be a live handle and `out` writable.
 */
enum NsiStatus nsi_estimate_to_json(const struct NsiEstimate *estimate, char **out);

/*
 Releases an estimate. Null is ignored.

 # Safety
 `estimate` must be null or a handle not yet freed.
 */
void nsi_estimate_free(struct NsiEstimate *estimate);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must be null or a string returned by this library and not yet freed.
 */
void nsi_string_free(char *s);

/*
 Horvitz–Thompson transform of `n` treatment indicators into `out`.

 # Safety
 `z` must hold `n` readable doubles and `out` `n` writable ones.
 */
enum NsiStatus nsi_ht_transform(const double *z, size_t n, double pi, double *out);

/*
 Wald test that two independent estimates are equal; writes the
 chi-square(1) statistic and its p-value.

 # Safety
 `out_stat` and `out_p_value` must be writable.
 */
enum NsiStatus nsi_wald_equality(double tau_a,
                                 double se_a,
                                 double tau_b,
                                 double se_b,
                                 double *out_stat,
                                 double *out_p_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NSI_H */
