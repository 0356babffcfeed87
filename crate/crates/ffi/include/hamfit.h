#ifndef HAMFIT_H
#define HAMFIT_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum HamfitBalance {
  HAMFIT_BALANCE_EQUAL = 0,
  HAMFIT_BALANCE_GDA = 1,
  HAMFIT_BALANCE_GDA_ADAM = 2,
  HAMFIT_BALANCE_MT_ADAM = 3,
  HAMFIT_BALANCE_JD = 4,
  HAMFIT_BALANCE_JD2 = 5,
} HamfitBalance;

typedef enum HamfitStatus {
  HAMFIT_STATUS_OK = 0,
  HAMFIT_STATUS_INVALID_ARGUMENT = 1,
  HAMFIT_STATUS_NULL_POINTER = 2,
  HAMFIT_STATUS_DIMENSION_MISMATCH = 3,
  HAMFIT_STATUS_NUMERICAL = 4,
  HAMFIT_STATUS_IO = 5,
  HAMFIT_STATUS_FORMAT = 6,
  HAMFIT_STATUS_PANIC = 7,
} HamfitStatus;

/**
 * Opaque dataset handle.
 */
typedef struct HamfitDataset HamfitDataset;

/**
 * Opaque model handle.
 */
typedef struct HamfitModel HamfitModel;

typedef struct HamfitTrainOptions {
  size_t epochs;
  double lr;
  double lr_lambda;
  enum HamfitBalance balance;
  bool use_lyapunov;
  bool use_energy;
  bool use_volume;
  size_t num_bases;
  /**
   * Train with known noise `noise_sigma` instead of learning it.
   */
  bool noise_prior;
  double noise_sigma;
  size_t substeps;
  uint64_t seed;
} HamfitTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into this library from the same thread.
 */
const char *hamfit_last_error(void);

/**
 * Static description of a status code.
 */
const char *hamfit_status_string(enum HamfitStatus status);

/**
 * Simulates a benchmark system (`"P"`, `"S"`, `"HH"`, `"DP"`, ...).
 */
enum HamfitStatus hamfit_dataset_generate(const char *system,
                                          size_t trajectories,
                                          size_t steps,
                                          double t_end,
                                          double noise_sigma,
                                          uint64_t seed,
                                          struct HamfitDataset **out);

enum HamfitStatus hamfit_dataset_load(const char *path, struct HamfitDataset **out);

enum HamfitStatus hamfit_dataset_save(const struct HamfitDataset *ds, const char *path);

/**
 * Frees a dataset; NULL is ignored.
 */
void hamfit_dataset_free(struct HamfitDataset *ds);

/**
 * Writes trajectory count, time points per trajectory and `d`.
 */
enum HamfitStatus hamfit_dataset_shape(const struct HamfitDataset *ds,
                                       size_t *trajectories,
                                       size_t *steps,
                                       size_t *d);

/**
 * Copies trajectory `index` as `steps × 2d` row-major states into `out`,
 * which must hold `len = steps · 2d` values.
 */
enum HamfitStatus hamfit_dataset_trajectory(const struct HamfitDataset *ds,
                                            size_t index,
                                            double *out,
                                            size_t len);

/**
 * Library defaults: 5000 epochs, lr 1e-3, equal weights, all regularizers, M = 100.
 */
struct HamfitTrainOptions hamfit_train_options_default(void);

/**
 * Trains a model. On divergence returns `HAMFIT_STATUS_NUMERICAL` and
 * still stores the last good model in `out`.
 */
enum HamfitStatus hamfit_train(const struct HamfitDataset *ds,
                               const struct HamfitTrainOptions *options,
                               struct HamfitModel **out);

enum HamfitStatus hamfit_model_load(const char *path, struct HamfitModel **out);

enum HamfitStatus hamfit_model_save(const struct HamfitModel *model, const char *path);

/**
 * Frees a model; NULL is ignored.
 */
void hamfit_model_free(struct HamfitModel *model);

enum HamfitStatus hamfit_model_dim(const struct HamfitModel *model, size_t *d);

/**
 * Mean-model Hamiltonian at `x` (length `2d`).
 */
enum HamfitStatus hamfit_model_hamiltonian(const struct HamfitModel *model,
                                           const double *x,
                                           size_t len,
                                           double *out);

/**
 * Mean-model vector field at `(x, t)`; `x` and `out` have length `2d`.
 */
enum HamfitStatus hamfit_model_vector_field(const struct HamfitModel *model,
                                            const double *x,
                                            size_t len,
                                            double t,
                                            double *out);

/**
 * Mean and std of per-trajectory test MSE under the mean model.
 */
enum HamfitStatus hamfit_evaluate_mse(const struct HamfitModel *model,
                                      const struct HamfitDataset *ds,
                                      double *mean,
                                      double *std);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HAMFIT_H */
