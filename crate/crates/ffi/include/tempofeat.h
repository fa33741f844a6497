#ifndef TEMPOFEAT_H
#define TEMPOFEAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TfStatus {
  TF_STATUS_OK = 0,
  TF_STATUS_NULL_POINTER = 1,
  TF_STATUS_INVALID_ARGUMENT = 2,
  TF_STATUS_PARSE = 3,
  TF_STATUS_IO = 4,
  TF_STATUS_INTEGRITY = 5,
  TF_STATUS_SINGULAR = 6,
  TF_STATUS_CONFIG = 7,
  TF_STATUS_BUFFER_TOO_SMALL = 8,
  TF_STATUS_PANIC = 9,
} TfStatus;

// Loaded dataset.
typedef struct TfDataset TfDataset;

// Trained pipeline read from `model.json`.
typedef struct TfModel TfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *tf_last_error(void);

// Library version as a static string.
const char *tf_version(void);

// Clumpiness of the activity days `days[0..n]` (1-based, at most `horizon`).
//
// # Safety
// `days` must point to `n` readable values and `out` to a writable double.
enum TfStatus tf_clumpiness(const uint32_t *days, size_t n, uint32_t horizon, double *out);

// ROC AUC of `scores` against 0/1 `labels`, ties counted one half.
//
// # Safety
// `scores` and `labels` must point to `n` readable values, `out` to a
// writable double.
enum TfStatus tf_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Loads `users.csv`, `activities.csv`, `branches.csv` and the optional
// `visits.csv` from `dir`.
//
// # Safety
// `dir` must be a nul-terminated string and `out` a writable pointer.
enum TfStatus tf_dataset_load(const char *dir, struct TfDataset **out);

// Number of users in a dataset (0 for a null handle).
//
// # Safety
// `ds` must be null or a handle from [`tf_dataset_load`].
size_t tf_dataset_num_users(const struct TfDataset *ds);

// # Safety
// `ds` must be null or a handle from [`tf_dataset_load`] not yet freed.
void tf_dataset_free(struct TfDataset *ds);

// Reads a trained pipeline written by `tempofeat train`.
//
// # Safety
// `path` must be a nul-terminated string and `out` a writable pointer.
enum TfStatus tf_model_load(const char *path, struct TfModel **out);

// 1 for a branch-visit model, 2 for an up-sell model, 0 for a null handle.
//
// # Safety
// `model` must be null or a handle from [`tf_model_load`].
uint8_t tf_model_task(const struct TfModel *model);

// # Safety
// `model` must be null or a handle from [`tf_model_load`] not yet freed.
void tf_model_free(struct TfModel *model);

// Up-sell scores for every user of `ds`, in user id order.
//
// Writes up to `capacity` entries and sets `*written` to the number of
// users; fails with `BufferTooSmall` (and writes nothing) when it exceeds
// `capacity`.
//
// # Safety
// Handles must be valid; `user_ids` and `scores` must have room for
// `capacity` values; `written` must be writable.
enum TfStatus tf_model_predict_scores(const struct TfModel *model,
                                      const struct TfDataset *ds,
                                      uint64_t *user_ids,
                                      double *scores,
                                      size_t capacity,
                                      size_t *written);

// Top-5 branches per user of `ds`, in user id order.
//
// User `i` fills slots `5 i .. 5 i + 5` of `branches` and `visits`; unused
// slots hold branch `UINT32_MAX` and 0 visits. Buffer sizing follows
// [`tf_model_predict_scores`], with `capacity` counted in users.
//
// # Safety
// Handles must be valid; `user_ids` must have room for `capacity` values,
// `branches` and `visits` for `5 * capacity`; `written` must be writable.
enum TfStatus tf_model_predict_top5(const struct TfModel *model,
                                    const struct TfDataset *ds,
                                    uint64_t *user_ids,
                                    uint32_t *branches,
                                    double *visits,
                                    size_t capacity,
                                    size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TEMPOFEAT_H */
