#ifndef DETSEG_H
#define DETSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_INVALID_ARGUMENT = 1,
  DS_STATUS_DATA = 2,
  DS_STATUS_VERSION_MISMATCH = 3,
  DS_STATUS_RUNTIME = 4,
  DS_STATUS_PANIC = 5,
} DsStatus;

/**
 * Loaded model. Not safe to share between threads without external locking.
 */
typedef struct DsModel DsModel;

/**
 * Instances produced by one inference call.
 */
typedef struct DsResult DsResult;

/**
 * One detected instance. `bbox` is `x1, y1, x2, y2` in pixels.
 */
typedef struct DsInstance {
  uint32_t class_id;
  double confidence;
  double bbox[4];
  uint64_t mask_area;
} DsInstance;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library name and version, static storage.
 */
const char *ds_version(void);

/**
 * Message of the last failure on this thread, or an empty string.
 */
const char *ds_last_error(void);

/**
 * Loads a checkpoint written by the same library version.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsStatus ds_model_load(const char *path, struct DsModel **out);

/**
 * # Safety
 * `model` must come from [`ds_model_load`] and not be used afterwards.
 */
void ds_model_free(struct DsModel *model);

/**
 * Number of object classes, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t ds_model_num_classes(const struct DsModel *model);

/**
 * Segments one packed RGB8 image. Rows are `stride` bytes apart
 * (`stride >= 3 * width`). A negative `score_threshold` uses the model's own.
 *
 * # Safety
 * `rgb` must point to `stride * height` readable bytes; `model` must be a
 * live handle and `out` a valid pointer.
 */
enum DsStatus ds_model_infer(const struct DsModel *model,
                             const uint8_t *rgb,
                             uint32_t width,
                             uint32_t height,
                             size_t stride,
                             double score_threshold,
                             struct DsResult **out);

/**
 * # Safety
 * `result` must come from [`ds_model_infer`] and not be used afterwards.
 */
void ds_result_free(struct DsResult *result);

/**
 * Instance count, 0 for a null handle.
 *
 * # Safety
 * `result` must be null or a live handle.
 */
size_t ds_result_count(const struct DsResult *result);

/**
 * Instances are ordered by decreasing confidence.
 *
 * # Safety
 * `result` must be a live handle and `out` a valid pointer.
 */
enum DsStatus ds_result_instance(const struct DsResult *result,
                                 size_t index,
                                 struct DsInstance *out);

/**
 * Writes the instance mask as `width * height` bytes, row-major, 1 inside.
 *
 * # Safety
 * `result` must be a live handle and `buf` must hold `len` writable bytes.
 */
enum DsStatus ds_result_mask(const struct DsResult *result, size_t index, uint8_t *buf, size_t len);

/**
 * IoU of two `x1, y1, x2, y2` boxes; 0 when the union is empty.
 *
 * # Safety
 * `a` and `b` must each point to four doubles.
 */
double ds_box_iou(const double *a, const double *b);

/**
 * Minimum-cost assignment of a row-major `rows x cols` cost matrix.
 * `out_col[i]` receives the column matched to row `i`, or -1.
 *
 * # Safety
 * `cost` must hold `rows * cols` doubles and `out_col` `rows` writable slots.
 */
enum DsStatus ds_hungarian(const double *cost, size_t rows, size_t cols, int64_t *out_col);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DETSEG_H */
