/* C ABI for the protovae library. Generated; do not edit. */

#ifndef PROTOVAE_H
#define PROTOVAE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of doubles written by [`protovae_evaluate`].
 */
#define PROTOVAE_SCORE_COUNT 5

/**
 * Result of every C-ABI call.
 */
enum ProtovaeStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  Ok = 0,
  /**
   * A required pointer was NULL.
   */
  NullArgument = 1,
  /**
   * Arguments or configuration were rejected.
   */
  InvalidArgument = 2,
  /**
   * A string argument was not valid UTF-8.
   */
  InvalidUtf8 = 3,
  /**
   * The operation itself failed (I/O, malformed file, diverged run...).
   */
  Failure = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  Panic = 5,
};
#ifndef __cplusplus
typedef int32_t ProtovaeStatus;
#endif // __cplusplus

/**
 * Opaque ground-truth dataset handle.
 */
typedef struct ProtovaeDataset ProtovaeDataset;

/**
 * Opaque encoder handle loaded from a checkpoint.
 */
typedef struct ProtovaeModel ProtovaeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread; never free it.
 */
const char *protovae_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *protovae_version(void);

/**
 * Open a dataset from a spec string: `toy` (built-in grid), a path to a
 * sprite-grid `.toml` config, or a path to a generated archive.
 *
 * # Safety
 * `spec` must be a NUL-terminated string; `out` must point to writable
 * storage for one pointer.
 */
ProtovaeStatus protovae_dataset_open(const char *spec, struct ProtovaeDataset **out);

/**
 * Number of images (the full factor product).
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
ProtovaeStatus protovae_dataset_len(const struct ProtovaeDataset *dataset, uint64_t *out);

/**
 * Number of ground-truth factors.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
ProtovaeStatus protovae_dataset_num_factors(const struct ProtovaeDataset *dataset, uint64_t *out);

/**
 * Cardinality of one factor.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
ProtovaeStatus protovae_dataset_radix(const struct ProtovaeDataset *dataset,
                                      uint64_t factor,
                                      uint64_t *out);

/**
 * Image geometry: height, width, channels.
 *
 * # Safety
 * `dataset` must be a live handle; the three out-pointers must be
 * writable.
 */
ProtovaeStatus protovae_dataset_image_shape(const struct ProtovaeDataset *dataset,
                                            uint64_t *out_height,
                                            uint64_t *out_width,
                                            uint64_t *out_channels);

/**
 * Release a dataset handle. NULL is ignored.
 *
 * # Safety
 * `dataset` must have come from [`protovae_dataset_open`] and not been
 * freed before.
 */
void protovae_dataset_free(struct ProtovaeDataset *dataset);

/**
 * Train a model from a TOML config string; checkpoints and the metrics
 * log land in `out_dir`. The config's `dataset` key is resolved exactly
 * like [`protovae_dataset_open`]'s spec.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
ProtovaeStatus protovae_train(const char *config_toml, const char *out_dir);

/**
 * Load a checkpoint's posterior-mean encoder.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * storage for one pointer.
 */
ProtovaeStatus protovae_model_load(const char *path, struct ProtovaeModel **out);

/**
 * Latent width d of a loaded model.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
ProtovaeStatus protovae_model_latent_dim(const struct ProtovaeModel *model, uint64_t *out);

/**
 * Encode dataset images to posterior-mean codes. `out` receives `n * d`
 * doubles in row-major order, where d is the model's latent width;
 * `out_len` must equal exactly that.
 *
 * # Safety
 * `model` and `dataset` must be live handles; `indices` must point to
 * `n` readable u64s; `out` must point to `out_len` writable doubles.
 */
ProtovaeStatus protovae_model_encode(const struct ProtovaeModel *model,
                                     const struct ProtovaeDataset *dataset,
                                     const uint64_t *indices,
                                     size_t n,
                                     double *out,
                                     size_t out_len);

/**
 * Release a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must have come from [`protovae_model_load`] and not been freed
 * before.
 */
void protovae_model_free(struct ProtovaeModel *model);

/**
 * Score a checkpoint with the full metric suite. `eval_config_toml` may
 * be NULL for defaults. `out_scores` receives exactly
 * [`PROTOVAE_SCORE_COUNT`] doubles in this order: FactorVAE score, MIG,
 * DCI disentanglement, DCI completeness, DCI informativeness.
 *
 * # Safety
 * `checkpoint` must be a NUL-terminated string; `dataset` must be a live
 * handle; `out_scores` must point to `out_len` writable doubles.
 */
ProtovaeStatus protovae_evaluate(const char *checkpoint,
                                 const struct ProtovaeDataset *dataset,
                                 const char *eval_config_toml,
                                 double *out_scores,
                                 size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOVAE_H */
