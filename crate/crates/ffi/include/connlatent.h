#ifndef CONNLATENT_H
#define CONNLATENT_H

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call. Values 2 to 5 match the command-line
// exit codes.
typedef enum ClStatus {
  CL_STATUS_OK = 0,
  // Invalid configuration or argument.
  CL_STATUS_CONFIG = 2,
  // Malformed or inconsistent input data, including i/o failures.
  CL_STATUS_DATA = 3,
  // Training did not produce a usable model.
  CL_STATUS_TRAINING = 4,
  // Metrics could not be computed.
  CL_STATUS_EVALUATION = 5,
  // A required pointer argument was null.
  CL_STATUS_NULL_POINTER = 10,
  // A string argument was not valid UTF-8.
  CL_STATUS_INVALID_UTF8 = 11,
  // The library panicked; the handle arguments should be considered lost.
  CL_STATUS_PANIC = 12,
} ClStatus;

// Classifier family accepted by [`cl_classifier_fit`].
typedef enum ClClassifierKind {
  CL_CLASSIFIER_KIND_SVM_LINEAR = 0,
  CL_CLASSIFIER_KIND_SVM_RBF = 1,
  CL_CLASSIFIER_KIND_FOREST = 2,
} ClClassifierKind;

// Opaque fitted classifier with its decision threshold.
typedef struct ClClassifier ClClassifier;

// Opaque fitted ComBat model.
typedef struct ClCombat ClCombat;

// Opaque subject table with its feature matrix.
typedef struct ClDataset ClDataset;

// Opaque trained DVAE.
typedef struct ClDvae ClDvae;

// Hyperparameters for [`cl_classifier_fit`]. Fields unused by the chosen
// kind are ignored.
typedef struct ClClassifierParams {
  enum ClClassifierKind kind;
  double c;
  double gamma;
  size_t n_trees;
  size_t max_depth;
  uint64_t seed;
} ClClassifierParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *cl_last_error(void);

// Library version as a static NUL-terminated string.
const char *cl_version(void);

// Loads a metadata CSV and a feature matrix (binary or CSV).
//
// # Safety
// Path arguments must be NUL-terminated strings; `out` must be writable.
enum ClStatus cl_dataset_load(const char *metadata_path,
                              const char *features_path,
                              struct ClDataset **out);

// Number of subjects in the dataset, or 0 for a null handle.
//
// # Safety
// `d` must be null or a live dataset handle.
size_t cl_dataset_len(const struct ClDataset *d);

// Feature columns of the dataset, or 0 for a null handle.
//
// # Safety
// `d` must be null or a live dataset handle.
size_t cl_dataset_feature_dim(const struct ClDataset *d);

// Copies the `len x feature_dim` feature matrix into `dst`.
//
// # Safety
// `d` must be a live dataset handle; `dst` must hold `capacity` values.
enum ClStatus cl_dataset_features(const struct ClDataset *d, double *dst, size_t capacity);

// Copies the 0/1 labels (1 = ASD) into `dst`.
//
// # Safety
// `d` must be a live dataset handle; `dst` must hold `capacity` bytes.
enum ClStatus cl_dataset_labels(const struct ClDataset *d, uint8_t *dst, size_t capacity);

// # Safety
// `d` must be null or a handle not yet freed.
void cl_dataset_free(struct ClDataset *d);

// Fits ComBat on the dataset with age and sex as protected covariates.
//
// # Safety
// `d` must be a live dataset handle; `out` must be writable.
enum ClStatus cl_combat_fit(const struct ClDataset *d, struct ClCombat **out);

// Harmonizes the dataset's features into `dst` (`len x feature_dim`).
//
// # Safety
// Handles must be live; `dst` must hold `capacity` values.
enum ClStatus cl_combat_apply(const struct ClCombat *m,
                              const struct ClDataset *d,
                              double *dst,
                              size_t capacity);

// # Safety
// `m` must be a live handle; `path` a NUL-terminated string.
enum ClStatus cl_combat_save(const struct ClCombat *m, const char *path);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ClStatus cl_combat_load(const char *path, struct ClCombat **out);

// # Safety
// `m` must be null or a handle not yet freed.
void cl_combat_free(struct ClCombat *m);

// Trains a DVAE on a `rows x cols` matrix with the default architecture
// and the given epoch count and seed.
//
// # Safety
// `x` must point to `rows * cols` values; `out` must be writable.
enum ClStatus cl_dvae_train(const double *x,
                            size_t rows,
                            size_t cols,
                            size_t epochs,
                            uint64_t seed,
                            struct ClDvae **out);

// Width of the extracted feature rows, `2 * latent_dim`, or 0 for a null
// handle.
//
// # Safety
// `m` must be null or a live handle.
size_t cl_dvae_output_dim(const struct ClDvae *m);

// Writes `[mu | logvar]` for each row of `x` into `dst`.
//
// # Safety
// `m` must be live; `x` must point to `rows * cols` values; `dst` must hold
// `capacity` values.
enum ClStatus cl_dvae_extract(const struct ClDvae *m,
                              const double *x,
                              size_t rows,
                              size_t cols,
                              double *dst,
                              size_t capacity);

// # Safety
// `m` must be a live handle; `path` a NUL-terminated string.
enum ClStatus cl_dvae_save(const struct ClDvae *m, const char *path);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ClStatus cl_dvae_load(const char *path, struct ClDvae **out);

// # Safety
// `m` must be null or a handle not yet freed.
void cl_dvae_free(struct ClDvae *m);

// Fits one classifier on `rows x cols` features and 0/1 labels. The
// threshold is the family default (0 for SVM, 0.5 for the forest).
//
// # Safety
// `x` must point to `rows * cols` values and `y` to `rows` labels; `params`
// must be readable; `out` must be writable.
enum ClStatus cl_classifier_fit(const double *x,
                                const uint8_t *y,
                                size_t rows,
                                size_t cols,
                                const struct ClClassifierParams *params,
                                struct ClClassifier **out);

// Sets the decision threshold applied by [`cl_classifier_predict`].
//
// # Safety
// `c` must be a live handle.
enum ClStatus cl_classifier_set_threshold(struct ClClassifier *c, double threshold);

// Scores each row into `scores` and, when `labels` is not null, writes
// `1` where the score exceeds the threshold.
//
// # Safety
// `c` must be live; `x` must point to `rows * cols` values; `scores` (and
// `labels` if given) must hold `rows` entries.
enum ClStatus cl_classifier_predict(const struct ClClassifier *c,
                                    const double *x,
                                    size_t rows,
                                    size_t cols,
                                    double *scores,
                                    uint8_t *labels);

// # Safety
// `c` must be null or a handle not yet freed.
void cl_classifier_free(struct ClClassifier *c);

// Runs the full pipeline. `preset` and `config_path` may be null;
// `overrides` holds `n_overrides` `key=value` strings applied last.
//
// # Safety
// Non-null strings must be NUL-terminated; `overrides` must point to
// `n_overrides` string pointers.
enum ClStatus cl_run_pipeline(const char *preset,
                              const char *config_path,
                              const char *const *overrides,
                              size_t n_overrides);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONNLATENT_H */
