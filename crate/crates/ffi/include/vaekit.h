#ifndef VAEKIT_H
#define VAEKIT_H

/* Generated by cbindgen at build time. Do not edit by hand. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every exported function.
 */
typedef enum VaekitStatus {
  VAEKIT_STATUS_OK = 0,
  VAEKIT_STATUS_NULL_POINTER = 1,
  VAEKIT_STATUS_INVALID_UTF8 = 2,
  VAEKIT_STATUS_SHAPE = 3,
  VAEKIT_STATUS_DOMAIN = 4,
  VAEKIT_STATUS_CONTRACT = 5,
  VAEKIT_STATUS_SPEC = 6,
  VAEKIT_STATUS_FORMAT = 7,
  VAEKIT_STATUS_INTEGRITY = 8,
  VAEKIT_STATUS_NON_FINITE = 9,
  VAEKIT_STATUS_SINGULAR = 10,
  VAEKIT_STATUS_CONFIG = 11,
  VAEKIT_STATUS_IO = 12,
  VAEKIT_STATUS_PANIC = 13,
} VaekitStatus;

/**
 * Opaque dataset.
 */
typedef struct VaekitDataset VaekitDataset;

/**
 * Opaque trained or freshly initialized model.
 */
typedef struct VaekitModel VaekitModel;

typedef struct VaekitShellResult {
  uint32_t n;
  double radius;
  double epsilon;
  double ratio_exact;
  double ratio_approx;
} VaekitShellResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread (empty after a
 * success). The pointer stays valid until the next call into this library
 * from the same thread.
 */
const char *vaekit_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vaekit_version(void);

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VaekitStatus vaekit_model_load(const char *path, struct VaekitModel **out);

/**
 * Freshly initialized MLP model (default hidden widths) for flat inputs.
 *
 * # Safety
 * `out` must be writable.
 */
enum VaekitStatus vaekit_model_init_mlp(size_t input_len,
                                        size_t latent_dim,
                                        uint64_t seed,
                                        struct VaekitModel **out);

/**
 * Releases a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void vaekit_model_free(struct VaekitModel *model);

/**
 * Latent dimension `d`, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t vaekit_model_latent_dim(const struct VaekitModel *model);

/**
 * Number of scalars per input sample, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t vaekit_model_input_len(const struct VaekitModel *model);

/**
 * Encodes `batch` samples (`batch × input_len`) into `mu` and `logvar`
 * (each `batch × d`).
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum VaekitStatus vaekit_model_encode(const struct VaekitModel *model,
                                      const double *x,
                                      size_t batch,
                                      double *mu,
                                      double *logvar);

/**
 * Decodes `batch` latent codes (`batch × d`) into `x_hat` (`batch × input_len`).
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum VaekitStatus vaekit_model_decode(const struct VaekitModel *model,
                                      const double *z,
                                      size_t batch,
                                      double *x_hat);

/**
 * Loads a `VAED` dataset file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VaekitStatus vaekit_dataset_load(const char *path, struct VaekitDataset **out);

/**
 * Generates the ellipse image dataset in memory.
 *
 * # Safety
 * `out` must be writable.
 */
enum VaekitStatus vaekit_dataset_gen_ellipse(size_t n,
                                             size_t side,
                                             uint64_t seed,
                                             struct VaekitDataset **out);

/**
 * Writes a dataset handle to a `VAED` file.
 *
 * # Safety
 * `dataset` must be live; `path` NUL-terminated.
 */
enum VaekitStatus vaekit_dataset_save(const struct VaekitDataset *dataset, const char *path);

/**
 * Releases a dataset handle. NULL is ignored.
 *
 * # Safety
 * `dataset` must come from this library and not be used afterwards.
 */
void vaekit_dataset_free(struct VaekitDataset *dataset);

/**
 * Number of samples, or 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
size_t vaekit_dataset_len(const struct VaekitDataset *dataset);

/**
 * Scalars per sample, or 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
size_t vaekit_dataset_sample_len(const struct VaekitDataset *dataset);

/**
 * Copies all samples (`len × sample_len` doubles) into `out`, whose
 * capacity in doubles is `capacity`.
 *
 * # Safety
 * `out` must hold `capacity` doubles.
 */
enum VaekitStatus vaekit_dataset_samples(const struct VaekitDataset *dataset,
                                         double *out,
                                         size_t capacity);

/**
 * Copies the `len` targets into `out`; contract error if the dataset has none.
 *
 * # Safety
 * `out` must hold `capacity` doubles.
 */
enum VaekitStatus vaekit_dataset_targets(const struct VaekitDataset *dataset,
                                         double *out,
                                         size_t capacity);

/**
 * KL(N(μ, e^logvar) ‖ N(0, I)) summed over `d` and averaged over `batch`.
 * `per_dim` (may be NULL) receives the `d` per-dimension batch means.
 *
 * # Safety
 * `mu` and `logvar` hold `batch × d` doubles; `per_dim` NULL or `d` doubles.
 */
enum VaekitStatus vaekit_kl_standard_normal(const double *mu,
                                            const double *logvar,
                                            size_t batch,
                                            size_t d,
                                            double *total,
                                            double *per_dim);

/**
 * Biased squared MMD between `x` (`n × d`) and `y` (`m × d`). With
 * `num_bandwidths == 0` the default set `{0.25, 0.5, 1, 2, 4}·d` is used.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum VaekitStatus vaekit_mmd_rbf(const double *x,
                                 size_t n,
                                 const double *y,
                                 size_t m,
                                 size_t d,
                                 const double *bandwidths,
                                 size_t num_bandwidths,
                                 double *out);

/**
 * Mean SSIM of two `height × width` images with a uniform `window`.
 *
 * # Safety
 * `x` and `y` hold `height × width` doubles.
 */
enum VaekitStatus vaekit_ssim(const double *x,
                              const double *y,
                              size_t height,
                              size_t width,
                              size_t window,
                              double c1,
                              double c2,
                              double *out);

/**
 * Volume of the `n`-ball of radius `radius`.
 *
 * # Safety
 * `out` must be writable.
 */
enum VaekitStatus vaekit_ball_volume(uint32_t n, double radius, double *out);

/**
 * Volume share of the outer shell of thickness `epsilon`.
 *
 * # Safety
 * `out` must be writable.
 */
enum VaekitStatus vaekit_shell_ratio(uint32_t n,
                                     double radius,
                                     double epsilon,
                                     struct VaekitShellResult *out);

/**
 * Fits a GLM from `latents` (`n × d`) to `targets` (`n`).
 * `coefficients` receives `d` weights followed by the intercept; `quality`
 * receives r² (identity link) or the deviance (`logistic != 0`).
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum VaekitStatus vaekit_fit_glm(const double *latents,
                                 size_t n,
                                 size_t d,
                                 const double *targets,
                                 bool logistic,
                                 double *coefficients,
                                 double *quality);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VAEKIT_H */
