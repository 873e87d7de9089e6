#ifndef CTEG_H
#define CTEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Which relations of a data file to keep, relative to the model's split.
typedef enum CtegSplit {
  CTEG_SPLIT_VALIDATION = 0,
  CTEG_SPLIT_TRAIN = 1,
  CTEG_SPLIT_ALL = 2,
} CtegSplit;

typedef enum CtegStatus {
  CTEG_STATUS_OK = 0,
  CTEG_STATUS_NULL_POINTER = 1,
  CTEG_STATUS_INVALID_UTF8 = 2,
  CTEG_STATUS_IO = 3,
  CTEG_STATUS_MALFORMED_INPUT = 4,
  CTEG_STATUS_INVALID_ARGUMENT = 5,
  CTEG_STATUS_CHECKPOINT = 6,
  CTEG_STATUS_WRONG_MODE = 7,
  CTEG_STATUS_PANIC = 8,
} CtegStatus;

// Loaded instances. Opaque to C.
typedef struct CtegDataset CtegDataset;

// Loaded model. Opaque to C.
typedef struct CtegModel CtegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Null-terminated library version. Static; do not free.
const char *cteg_version(void);

// Message for the last failed call on this thread, or null. Valid until the
// next call into the library from this thread; do not free.
const char *cteg_last_error(void);

// # Safety
// `path` must be a valid C string and `model_out` a valid pointer.
enum CtegStatus cteg_model_load(const char *path, struct CtegModel **model_out);

// # Safety
// `model` must come from [`cteg_model_load`] and not be used afterwards.
void cteg_model_free(struct CtegModel *model);

// Reads a JSONL file, keeping the relations selected by `split` relative to
// the split recorded in `model`.
//
// # Safety
// Pointers must be valid; `model` must come from [`cteg_model_load`].
enum CtegStatus cteg_dataset_load(const char *path,
                                  const struct CtegModel *model,
                                  enum CtegSplit split,
                                  struct CtegDataset **dataset_out);

// Number of instances, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or come from [`cteg_dataset_load`].
size_t cteg_dataset_len(const struct CtegDataset *dataset);

// # Safety
// `dataset` must come from [`cteg_dataset_load`] and not be used afterwards.
void cteg_dataset_free(struct CtegDataset *dataset);

// Mean accuracy over `episodes` sampled N-way K-shot episodes, with its
// standard error.
//
// # Safety
// Handles must be valid; `mean_out` and `stderr_out` must be writable.
enum CtegStatus cteg_evaluate(const struct CtegModel *model,
                              const struct CtegDataset *dataset,
                              size_t n,
                              size_t k,
                              size_t q,
                              size_t episodes,
                              uint64_t seed,
                              double *mean_out,
                              double *stderr_out);

// Per-token gate values of one instance given as a JSON object.
//
// # Safety
// `model` must be valid, `instance_json` a valid C string and `json_out`
// writable. Free the result with [`cteg_string_free`].
enum CtegStatus cteg_gates_json(const struct CtegModel *model,
                                const char *instance_json,
                                char **json_out);

// Relative positions and syntactic tags of one instance.
//
// # Safety
// `instance_json` must be a valid C string and `json_out` writable. Free the
// result with [`cteg_string_free`].
enum CtegStatus cteg_featurize_json(const char *instance_json, char **json_out);

// Distance distributions for query `query` of the episode drawn with
// `episode_seed`.
//
// # Safety
// Handles must be valid and `json_out` writable. Free the result with
// [`cteg_string_free`].
enum CtegStatus cteg_distances_json(const struct CtegModel *model,
                                    const struct CtegDataset *dataset,
                                    size_t n,
                                    size_t k,
                                    size_t q,
                                    uint64_t episode_seed,
                                    size_t query,
                                    char **json_out);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void cteg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTEG_H */
