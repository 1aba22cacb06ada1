#ifndef PROTOPOOL_H
#define PROTOPOOL_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

enum PpStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  PP_STATUS_OK = 0,
  PP_STATUS_NULL_POINTER = 1,
  PP_STATUS_INVALID_ARGUMENT = 2,
  PP_STATUS_IO = 3,
  PP_STATUS_FORMAT = 4,
  PP_STATUS_DIMENSION = 5,
  PP_STATUS_NUMERIC = 6,
  PP_STATUS_PANIC = 7,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum PpStatus PpStatus;
#else
typedef int32_t PpStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque dataset handle.
 */
typedef struct PpDataset PpDataset;

/**
 * Opaque model handle. Keeps the whole checkpoint so a load/save cycle
 * preserves phase and metadata.
 */
typedef struct PpModel PpModel;

/**
 * Synthetic generator settings. Fill with [`pp_synth_spec_default`] and
 * adjust.
 */
typedef struct PpSynthSpec {
  size_t classes;
  size_t parts;
  size_t parts_per_class;
  double shared_fraction;
  double sigma;
  double background_offset;
  double jitter;
  size_t height;
  size_t width;
  size_t depth;
  size_t samples_per_class;
  uint64_t seed;
} PpSynthSpec;

/**
 * Model size and run length for [`pp_train`]. Everything else keeps the
 * library defaults. `epoch_budget < 0` means no cap.
 */
typedef struct PpTrainOptions {
  size_t slots;
  size_t prototypes;
  size_t depth;
  uint64_t seed;
  int64_t epoch_budget;
} PpTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL, or
 * 0 when the last call succeeded.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t pp_last_error(char *buf, size_t len);

/**
 * Static NUL-terminated version string.
 */
const char *pp_version(void);

struct PpSynthSpec pp_synth_spec_default(void);

/**
 * # Safety
 * `spec` must be null or valid; `out` must be a valid pointer.
 */
PpStatus pp_dataset_synthetic(const struct PpSynthSpec *spec, struct PpDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
PpStatus pp_dataset_read(const char *path, struct PpDataset **out);

/**
 * # Safety
 * `ds` must be a live handle; `path` a NUL-terminated string.
 */
PpStatus pp_dataset_write(const struct PpDataset *ds, const char *path);

/**
 * Stratified train/validation split. Both outputs are new handles.
 *
 * # Safety
 * `ds` must be a live handle; `train` and `val` valid pointers.
 */
PpStatus pp_dataset_split(const struct PpDataset *ds,
                          double val_fraction,
                          uint64_t seed,
                          struct PpDataset **train,
                          struct PpDataset **val);

/**
 * Number of samples, 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t pp_dataset_len(const struct PpDataset *ds);

/**
 * Any of the output pointers may be null.
 *
 * # Safety
 * `ds` must be a live handle.
 */
PpStatus pp_dataset_dims(const struct PpDataset *ds,
                         size_t *height,
                         size_t *width,
                         size_t *depth,
                         size_t *classes);

/**
 * Copies sample `index` (row-major `H·W·D`) into `map` and its label into
 * `label`.
 *
 * # Safety
 * `ds` must be a live handle; `map` must hold `map_len` doubles.
 */
PpStatus pp_dataset_sample(const struct PpDataset *ds,
                           size_t index,
                           double *map,
                           size_t map_len,
                           size_t *label);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void pp_dataset_free(struct PpDataset *ds);

/**
 * Trains a model on `train`, early-stopping on `val`.
 *
 * # Safety
 * Handles must be live; `options` valid; `out` a valid pointer.
 */
PpStatus pp_train(const struct PpDataset *train_ds,
                  const struct PpDataset *val_ds,
                  const struct PpTrainOptions *options,
                  struct PpModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
PpStatus pp_model_load(const char *path, struct PpModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
PpStatus pp_model_save(const struct PpModel *model, const char *path);

/**
 * Any of the output pointers may be null.
 *
 * # Safety
 * `model` must be a live handle.
 */
PpStatus pp_model_dims(const struct PpModel *model,
                       size_t *classes,
                       size_t *slots,
                       size_t *prototypes,
                       size_t *depth,
                       size_t *input_depth);

/**
 * Hardened prototype index of every slot, class-major (`C·K` entries).
 *
 * # Safety
 * `model` must be a live handle; `out` must hold `len` entries.
 */
PpStatus pp_model_assignment(const struct PpModel *model, size_t *out, size_t len);

/**
 * Class logits of one feature map with hardened slots.
 *
 * # Safety
 * `model` must be a live handle; `map` must hold `height·width·depth`
 * doubles; `logits` must hold `logits_len` doubles.
 */
PpStatus pp_model_forward(const struct PpModel *model,
                          const double *map,
                          size_t height,
                          size_t width,
                          size_t depth,
                          double *logits,
                          size_t logits_len);

/**
 * Logits for every sample of `ds`, sample-major (`N·C` entries).
 *
 * # Safety
 * Handles must be live; `logits` must hold `logits_len` doubles.
 */
PpStatus pp_model_predict(const struct PpModel *model,
                          const struct PpDataset *ds,
                          double *logits,
                          size_t logits_len);

/**
 * Top-1 accuracy on `ds`.
 *
 * # Safety
 * Handles must be live; `accuracy` a valid pointer.
 */
PpStatus pp_model_evaluate(const struct PpModel *model,
                           const struct PpDataset *ds,
                           double *accuracy);

/**
 * Similarity of `prototype` to every location of `map` (`height·width`
 * entries, row-major).
 *
 * # Safety
 * `model` must be a live handle; `map` must hold `height·width·depth`
 * doubles; `out` must hold `out_len` doubles.
 */
PpStatus pp_model_activation(const struct PpModel *model,
                             const double *map,
                             size_t height,
                             size_t width,
                             size_t depth,
                             size_t prototype,
                             double *out,
                             size_t out_len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void pp_model_free(struct PpModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOPOOL_H */
