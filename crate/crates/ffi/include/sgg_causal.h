#ifndef SGG_CAUSAL_H
#define SGG_CAUSAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum SggStatus {
  SGG_STATUS_OK = 0,
  SGG_STATUS_NULL_POINTER = 1,
  SGG_STATUS_INVALID_ARGUMENT = 2,
  SGG_STATUS_CONFIG = 3,
  SGG_STATUS_DATA = 4,
  SGG_STATUS_NUMERIC = 5,
  SGG_STATUS_IO = 6,
  SGG_STATUS_PANIC = 7,
} SggStatus;

/*
 One split of a synthetic dataset.
 */
typedef struct SggDataset SggDataset;

/*
 A trained causal model.
 */
typedef struct SggModel SggModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version, static storage.
 */
const char *sgg_version(void);

/*
 Message of the last failed call on this thread; empty after a success.
 Valid until the next call on this thread.
 */
const char *sgg_last_error(void);

/*
 # Safety
 `s` must come from this library or be null.
 */
void sgg_string_free(char *s);

/*
 Generates the splits of an experiment config (JSON, null for defaults)
 and returns the requested one (`"train"`, `"val"` or `"test"`).

 # Safety
 String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum SggStatus sgg_dataset_generate(const char *config_json,
                                    const char *split,
                                    struct SggDataset **out);

/*
 Loads one split from a data directory written by `gen-data`.

 # Safety
 String arguments must be NUL-terminated; `out` must be writable.
 */
enum SggStatus sgg_dataset_load(const char *data_dir, const char *split, struct SggDataset **out);

/*
 Number of images, 0 for a null handle.

 # Safety
 `d` must be null or a live handle.
 */
uintptr_t sgg_dataset_len(const struct SggDataset *d);

/*
 # Safety
 `d` must be null or a handle not freed before.
 */
void sgg_dataset_free(struct SggDataset *d);

/*
 Trains a model on `train` in a debias mode (`"none"`, `"focal"`,
 `"reweight"`, `"resample"`, `"x2y_tr"`) with the training section of an
 experiment config (JSON, null for defaults). `val` may be null.

 # Safety
 Handles must be live; strings null or NUL-terminated; `out` writable.
 */
enum SggStatus sgg_model_train(const struct SggDataset *train,
                               const struct SggDataset *val,
                               const char *config_json,
                               const char *mode,
                               struct SggModel **out);

/*
 Loads a checkpoint JSON file.

 # Safety
 `path` must be NUL-terminated; `out` writable.
 */
enum SggStatus sgg_model_load(const char *path, struct SggModel **out);

/*
 Writes a checkpoint JSON file.

 # Safety
 `m` must be live; `path` NUL-terminated.
 */
enum SggStatus sgg_model_save(const struct SggModel *m, const char *path);

/*
 # Safety
 `m` must be null or a handle not freed before.
 */
void sgg_model_free(struct SggModel *m);

/*
 Ranked predictions of image `index` under an effect (`"tde"`,
 `"baseline"`, ...) and task (`"predcls"`, `"sgcls"`), as JSON.

 # Safety
 Handles must be live; strings NUL-terminated; `out_json` writable.
 */
enum SggStatus sgg_predict_json(const struct SggModel *m,
                                const struct SggDataset *d,
                                uintptr_t index,
                                const char *method,
                                const char *task,
                                char **out_json);

/*
 Full evaluation report (recall, mean recall, zero-shot recall at
 K = 20, 50, 100, graph-constrained) of an effect on a dataset, as JSON.

 # Safety
 Handles must be live; strings NUL-terminated; `out_json` writable.
 */
enum SggStatus sgg_evaluate_json(const struct SggModel *m,
                                 const struct SggDataset *d,
                                 const char *method,
                                 const char *task,
                                 char **out_json);

/*
 Recall@K of one ranked prediction list (JSON) against one ground-truth
 scene graph (JSON): matched triplets into `out_hits`, ground-truth
 triplets into `out_total`.

 # Safety
 Strings NUL-terminated; out-pointers writable.
 */
enum SggStatus sgg_recall_at_k(const char *predictions_json,
                               const char *graph_json,
                               uintptr_t k,
                               bool graph_constraint,
                               uintptr_t *out_hits,
                               uintptr_t *out_total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGG_CAUSAL_H */
