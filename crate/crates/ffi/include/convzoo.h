#ifndef CONVZOO_H
#define CONVZOO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum CzStatus {
  CZ_STATUS_OK = 0,
  CZ_STATUS_NULL_ARGUMENT = 1,
  CZ_STATUS_INVALID_ARGUMENT = 2,
  CZ_STATUS_SHAPE = 3,
  CZ_STATUS_CONFIG = 4,
  CZ_STATUS_DATA = 5,
  CZ_STATUS_STATE = 6,
  CZ_STATUS_FORMAT = 7,
  CZ_STATUS_PARSE = 8,
  CZ_STATUS_IO = 9,
  CZ_STATUS_BUFFER_TOO_SMALL = 10,
  CZ_STATUS_INTERNAL = 11,
  CZ_STATUS_PANIC = 12,
} CzStatus;

/*
 Opaque model handle.
 */
typedef struct CzModel CzModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 The pointer stays valid until the next library call on the same thread.
 */
const char *cz_last_error(void);

/*
 Library version as a static nul-terminated string.
 */
const char *cz_version(void);

/*
 Builds a model.

 `kind` is one of the model names (`evolved_baseline`, `mini_yolo`, ...).
 `width` scales channel counts (1.0 for the full model); `resolution`
 overrides the square input size when non-zero. For `transfer_head` the
 feature dimension is 1280.

 # Safety
 `kind` must be a nul-terminated string and `out` a writable pointer.
 */
enum CzStatus cz_model_new(const char *kind,
                           uintptr_t classes,
                           double width,
                           uintptr_t resolution,
                           uint64_t seed,
                           struct CzModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from [`cz_model_new`] and not be used afterwards.
 */
void cz_model_free(struct CzModel *model);

/*
 Per-sample input extents.

 # Safety
 All pointers must be valid.
 */
enum CzStatus cz_model_input_shape(const struct CzModel *model,
                                   uintptr_t *channels,
                                   uintptr_t *height,
                                   uintptr_t *width);

/*
 Number of values [`cz_model_predict`] writes per sample: class
 probabilities, followed by four box coordinates for detectors.

 # Safety
 All pointers must be valid.
 */
enum CzStatus cz_model_output_len(const struct CzModel *model, uintptr_t *len);

/*
 Trainable parameters, frozen parameters and non-trainable buffers.

 # Safety
 All pointers must be valid.
 */
enum CzStatus cz_model_param_counts(const struct CzModel *model,
                                    uint64_t *trainable,
                                    uint64_t *frozen,
                                    uint64_t *buffers);

/*
 Per-layer footprint audit as a JSON document. Release the result with
 [`cz_string_free`].

 # Safety
 All pointers must be valid.
 */
enum CzStatus cz_model_audit_json(const struct CzModel *model, char **out);

/*
 Sets the trainable flag of every parameter whose name starts with
 `prefix`; `matched` (may be null) receives the number of entries.

 # Safety
 `model` must be a live handle and `prefix` a nul-terminated string.
 */
enum CzStatus cz_model_set_trainable(struct CzModel *model,
                                     const char *prefix,
                                     bool trainable,
                                     uintptr_t *matched);

/*
 Freezes every parameter outside the classification head.

 # Safety
 `model` must be a live handle.
 */
enum CzStatus cz_model_freeze_backbone(struct CzModel *model);

/*
 Writes the model's parameters, buffers and trainable flags to a CNT1
 checkpoint.

 # Safety
 `model` must be a live handle and `path` a nul-terminated string.
 */
enum CzStatus cz_model_save(const struct CzModel *model, const char *path);

/*
 Loads a checkpoint written for the same architecture. On failure the
 model is unchanged.

 # Safety
 `model` must be a live handle and `path` a nul-terminated string.
 */
enum CzStatus cz_model_load(struct CzModel *model, const char *path);

/*
 Inference on `batch` samples laid out as `(batch, c, h, w)` row-major.
 Writes `batch * output_len` values to `out`, which must have room for
 `out_len` floats.

 # Safety
 `input` must point to `batch * c * h * w` floats and `out` to `out_len`.
 */
enum CzStatus cz_model_predict(struct CzModel *model,
                               const float *input,
                               uintptr_t batch,
                               float *out,
                               uintptr_t out_len);

/*
 Intersection over union of two `x1, y1, x2, y2` boxes.

 # Safety
 `a` and `b` must point to four floats each, `out` must be writable.
 */
enum CzStatus cz_iou(const float *a, const float *b, double *out);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not be used afterwards.
 */
void cz_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONVZOO_H */
