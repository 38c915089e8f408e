#ifndef ERASURE_LAB_H
#define ERASURE_LAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ElStatus {
  EL_STATUS_OK = 0,
  EL_STATUS_NULL_POINTER = 1,
  EL_STATUS_INVALID_ARGUMENT = 2,
  EL_STATUS_NOT_SEPARABLE = 3,
  EL_STATUS_NUMERICAL = 4,
  EL_STATUS_IO = 5,
  EL_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * The requested quantity is undefined (e.g. empty minority group).
   */
  EL_STATUS_UNDEFINED = 7,
  EL_STATUS_INTERNAL = 8,
  EL_STATUS_PANIC = 9,
} ElStatus;

/**
 * Which label a classifier is trained on.
 */
typedef enum ElTask {
  EL_TASK_MAIN = 0,
  EL_TASK_CONCEPT = 1,
} ElTask;

typedef struct ElClassifier ElClassifier;

typedef struct ElDataset ElDataset;

typedef struct ElGenConfig {
  size_t n_points;
  size_t d_m;
  size_t d_p;
  double kappa_target;
  double class_separation;
  double feature_noise_sd;
  double label_noise_rate;
  uint64_t seed;
} ElGenConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *el_last_error_message(void);

/**
 * Fills `cfg` with the library defaults.
 *
 * # Safety
 * `cfg` must be null or point to writable memory for one `ElGenConfig`.
 */
enum ElStatus el_gen_config_default(struct ElGenConfig *cfg);

/**
 * # Safety
 * `cfg` must point to a valid config and `ds_out` to writable storage for a pointer.
 */
enum ElStatus el_dataset_generate(const struct ElGenConfig *cfg, struct ElDataset **ds_out);

/**
 * # Safety
 * `ds` must be null or a handle from `el_dataset_generate` not yet freed.
 */
void el_dataset_free(struct ElDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle; each out pointer must be null or writable.
 */
enum ElStatus el_dataset_shape(const struct ElDataset *ds, size_t *n, size_t *d_m, size_t *d_p);

/**
 * # Safety
 * `ds` must be a live handle and `kappa` writable.
 */
enum ElStatus el_dataset_kappa(const struct ElDataset *ds, double *kappa);

/**
 * Copies the points row-major into `buf`, which must hold `n * (d_m + d_p)` values.
 *
 * # Safety
 * `buf` must be valid for `len` writes.
 */
enum ElStatus el_dataset_copy_points(const struct ElDataset *ds, double *buf, size_t len);

/**
 * Copies both label vectors; either buffer may be null.
 *
 * # Safety
 * Non-null buffers must be valid for `len` writes.
 */
enum ElStatus el_dataset_copy_labels(const struct ElDataset *ds,
                                     int8_t *y_main,
                                     int8_t *y_concept,
                                     size_t len);

/**
 * Writes the dataset CSV plus its `.meta` sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string.
 */
enum ElStatus el_dataset_save_csv(const struct ElDataset *ds, const char *path);

/**
 * Hard-margin classifier on all features. Fails with `NotSeparable` when no
 * separator exists.
 *
 * # Safety
 * `ds` must be a live handle and `clf_out` writable.
 */
enum ElStatus el_train_max_margin(const struct ElDataset *ds,
                                  enum ElTask task,
                                  struct ElClassifier **clf_out);

/**
 * Full-batch logistic regression on all features.
 *
 * # Safety
 * `ds` must be a live handle and `clf_out` writable.
 */
enum ElStatus el_train_logistic(const struct ElDataset *ds,
                                enum ElTask task,
                                uint64_t seed,
                                struct ElClassifier **clf_out);

/**
 * # Safety
 * `clf` must be null or a live classifier handle.
 */
void el_classifier_free(struct ElClassifier *clf);

/**
 * # Safety
 * `clf` must be a live handle and `dim` writable.
 */
enum ElStatus el_classifier_dim(const struct ElClassifier *clf, size_t *dim);

/**
 * # Safety
 * `clf` must be a live handle and `bias` writable.
 */
enum ElStatus el_classifier_bias(const struct ElClassifier *clf, double *bias);

/**
 * # Safety
 * `buf` must be valid for `len` writes.
 */
enum ElStatus el_classifier_copy_weights(const struct ElClassifier *clf, double *buf, size_t len);

/**
 * `I - w w^T / |w|^2` for a nonzero `w` of length `d`, row-major into `out_buf` (`d * d` values).
 *
 * # Safety
 * `w` must be valid for `d` reads and `out_buf` for `len` writes.
 */
enum ElStatus el_projection_matrix(const double *w, size_t d, double *out_buf, size_t len);

/**
 * Main-task spuriousness of `f` against `clean` on `ds`. Returns `Undefined`
 * when the minority group is empty or the clean classifier misses all of it.
 *
 * # Safety
 * All handles must be live and `psi` writable.
 */
enum ElStatus el_spuriousness_main(const struct ElClassifier *f,
                                   const struct ElDataset *ds,
                                   const struct ElClassifier *clean,
                                   double *psi);

/**
 * Fraction of agreeing label pairs.
 *
 * # Safety
 * Both label arrays must be valid for `n` reads.
 */
enum ElStatus el_compute_kappa(const int8_t *y_main,
                               const int8_t *y_concept,
                               size_t n,
                               double *kappa);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ERASURE_LAB_H */
