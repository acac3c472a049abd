#ifndef MTL_WORKBENCH_H
#define MTL_WORKBENCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MtlwStatus {
  MTLW_STATUS_OK = 0,
  MTLW_STATUS_NULL_POINTER = 1,
  MTLW_STATUS_INVALID_ARGUMENT = 2,
  MTLW_STATUS_IO = 3,
  MTLW_STATUS_CORRUPT = 4,
  MTLW_STATUS_VERSION_MISMATCH = 5,
  MTLW_STATUS_UNKNOWN_TASK = 6,
  MTLW_STATUS_BUFFER_TOO_SMALL = 7,
  MTLW_STATUS_FAILED = 8,
  MTLW_STATUS_PANIC = 9,
} MtlwStatus;

// Trained model restored from a checkpoint, held in evaluation mode.
typedef struct MtlwModel MtlwModel;

// Loaded task pool.
typedef struct MtlwPool MtlwPool;

typedef struct MtlwPoolSummary {
  size_t task_count;
  size_t class_total;
  size_t image_total;
} MtlwPoolSummary;

typedef struct MtlwTaskInfo {
  uint32_t id;
  size_t classes;
  size_t samples;
  size_t channels;
  size_t height;
  size_t width;
} MtlwTaskInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call into the library from the same thread.
const char *mtlw_last_error(void);

// Library version as a static NUL-terminated string.
const char *mtlw_version(void);

// Loads a pool from a directory holding `manifest.json` or from the manifest
// file itself.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MtlwStatus mtlw_pool_load(const char *path, struct MtlwPool **out);

// # Safety
// `pool` must come from [`mtlw_pool_load`] and not be freed twice; null is
// ignored.
void mtlw_pool_free(struct MtlwPool *pool);

// # Safety
// `pool` must be a live handle and `out` writable.
enum MtlwStatus mtlw_pool_summary(const struct MtlwPool *pool, struct MtlwPoolSummary *out);

// Describes the task at position `index` (0-based, in pool order).
//
// # Safety
// `pool` must be a live handle and `out` writable.
enum MtlwStatus mtlw_pool_task_info(const struct MtlwPool *pool,
                                    size_t index,
                                    struct MtlwTaskInfo *out);

// Restores a model from a checkpoint file and switches it to evaluation mode.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MtlwStatus mtlw_model_load(const char *path, struct MtlwModel **out);

// # Safety
// `model` must come from [`mtlw_model_load`] and not be freed twice; null is
// ignored.
void mtlw_model_free(struct MtlwModel *model);

// Length of one feature vector.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum MtlwStatus mtlw_model_feature_dim(const struct MtlwModel *model, size_t *out);

// Trunk features of `n` images given as normalized row-major `n × C × H × W`
// floats. Writes `n × feature_dim` floats to `out`.
//
// # Safety
// `images` must hold `n · C · H · W` floats and `out` `out_len` floats.
enum MtlwStatus mtlw_model_extract_features(const struct MtlwModel *model,
                                            const float *images,
                                            size_t n,
                                            float *out,
                                            size_t out_len);

// Features of every sample of pool task `index`, normalized with the pool's
// statistics first. Writes `samples × feature_dim` doubles.
//
// # Safety
// `out` must hold `out_len` doubles.
enum MtlwStatus mtlw_task_features(const struct MtlwModel *model,
                                   const struct MtlwPool *pool,
                                   size_t index,
                                   double *out,
                                   size_t out_len);

// Area under the ROC curve of binary `labels` (0 or 1) scored by `scores`;
// ties count one half.
//
// # Safety
// Both arrays must hold `n` elements and `out` must be writable.
enum MtlwStatus mtlw_roc_auc(const double *scores, const uint32_t *labels, size_t n, double *out);

// Fraction of `predictions` equal to `labels`.
//
// # Safety
// Both arrays must hold `n` elements and `out` must be writable.
enum MtlwStatus mtlw_accuracy(const uint32_t *predictions,
                              const uint32_t *labels,
                              size_t n,
                              double *out);

// Mean rank per row of a row-major `combos × tasks` matrix. Pass a negative
// `exclude_column` to average over every column.
//
// # Safety
// `ranks` must hold `combos · tasks` doubles and `out` `combos` doubles.
enum MtlwStatus mtlw_average_rank(const double *ranks,
                                  size_t combos,
                                  size_t tasks,
                                  int64_t exclude_column,
                                  double *out);

// Row with the lowest average rank once `target_column` is dropped; the
// lowest row index wins ties.
//
// # Safety
// `ranks` must hold `combos · tasks` doubles and `out_row` be writable.
enum MtlwStatus mtlw_select_combo(const double *ranks,
                                  size_t combos,
                                  size_t tasks,
                                  size_t target_column,
                                  size_t *out_row);

// 1 when the two means differ by more than twice the larger standard
// deviation, else 0.
int32_t mtlw_significant(double mean_a, double std_a, double mean_b, double std_b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTL_WORKBENCH_H */
