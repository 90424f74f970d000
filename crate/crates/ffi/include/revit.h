#ifndef REVIT_FFI_H
#define REVIT_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum RevitStatus {
  REVIT_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  REVIT_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument or input failed validation.
   */
  REVIT_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read.
   */
  REVIT_STATUS_IO = 3,
  /**
   * A file was readable but malformed.
   */
  REVIT_STATUS_FORMAT = 4,
  /**
   * Checkpoint contents disagree with its manifest.
   */
  REVIT_STATUS_CORRUPT_CHECKPOINT = 5,
  /**
   * Buffer or tensor extents do not match.
   */
  REVIT_STATUS_DIMENSION = 6,
  /**
   * An index (such as a length index) is out of range.
   */
  REVIT_STATUS_INDEX = 7,
  /**
   * An unexpected internal failure; the library caught a panic.
   */
  REVIT_STATUS_INTERNAL = 8,
} RevitStatus;

/**
 * A trained resizable ViT.
 */
typedef struct RevitModel RevitModel;

/**
 * A trained token-length assigner.
 */
typedef struct RevitTla RevitTla;

/**
 * Image geometry and output sizes of a loaded model.
 */
typedef struct RevitModelInfo {
  size_t image_size;
  size_t channels;
  size_t num_classes;
  size_t num_lengths;
} RevitModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into the library from this thread.
 */
const char *revit_last_error(void);

/**
 * Static name of a status code.
 */
const char *revit_status_name(enum RevitStatus status);

/**
 * Loads a model checkpoint written by `revit train-revit`. The
 * architecture is read from the checkpoint's metadata.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RevitStatus revit_model_load(const char *path, struct RevitModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`revit_model_load`] and not be used afterwards.
 */
void revit_model_free(struct RevitModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum RevitStatus revit_model_info(const struct RevitModel *model, struct RevitModelInfo *out);

/**
 * Class logits at one token length, `batch × num_classes` floats into
 * `out_logits`, whose capacity `out_len` must be at least that.
 *
 * # Safety
 * `images` must hold `batch` images and `out_logits` `out_len` floats.
 */
enum RevitStatus revit_model_logits(const struct RevitModel *model,
                                    const float *images,
                                    size_t batch,
                                    size_t length_idx,
                                    float *out_logits,
                                    size_t out_len);

/**
 * Predicted class of each image at one token length.
 *
 * # Safety
 * `images` must hold `batch` images and `out_classes` `batch` entries.
 */
enum RevitStatus revit_model_predict(const struct RevitModel *model,
                                     const float *images,
                                     size_t batch,
                                     size_t length_idx,
                                     size_t *out_classes);

/**
 * Analytic inference FLOPs of one image at `length_idx`.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum RevitStatus revit_model_count_flops(const struct RevitModel *model,
                                         size_t length_idx,
                                         uint64_t *out);

/**
 * Loads an assigner checkpoint written by `revit train-tla`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RevitStatus revit_tla_load(const char *path, struct RevitTla **out);

/**
 * Releases an assigner; null is ignored.
 *
 * # Safety
 * `tla` must come from [`revit_tla_load`] and not be used afterwards.
 */
void revit_tla_free(struct RevitTla *tla);

/**
 * Token-length index chosen for each image.
 *
 * # Safety
 * `images` must hold `batch` images and `out_lengths` `batch` entries.
 */
enum RevitStatus revit_tla_assign(const struct RevitTla *tla,
                                  const float *images,
                                  size_t batch,
                                  size_t *out_lengths);

/**
 * Analytic FLOPs of one assigner forward.
 *
 * # Safety
 * `tla` must be a live handle and `out` a valid pointer.
 */
enum RevitStatus revit_tla_count_flops(const struct RevitTla *tla, uint64_t *out);

/**
 * Assigns each image a length, then classifies it at that length. Each
 * output array receives `batch` entries; `out_flops` is the per-image cost
 * including the assigner.
 *
 * # Safety
 * `images` must hold `batch` images; every output must hold `batch` entries.
 */
enum RevitStatus revit_adaptive_predict(const struct RevitModel *model,
                                        const struct RevitTla *tla,
                                        const float *images,
                                        size_t batch,
                                        size_t *out_classes,
                                        size_t *out_lengths,
                                        uint64_t *out_flops);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REVIT_FFI_H */
