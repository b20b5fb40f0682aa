// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

/* C interface to the HMMoE library. All functions are thread-safe with
 * respect to distinct handles. On failure a function returns a non-zero
 * status and hmmoe_last_error() describes the failure on the calling thread.
 *
 * Text outputs use a caller buffer: the result is written (NUL-terminated)
 * when `capacity` suffices, and `*needed` (if non-NULL) receives the required
 * size including the terminator. A NULL buffer with capacity 0 is a size
 * query. Query functions report a short buffer as HMMOE_BUFFER_TOO_SMALL; the
 * run functions (train, ablate, verify) keep their run status and leave the
 * buffer untouched instead.
 */
#ifndef HMMOE_H_
#define HMMOE_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define HMMOE_API __declspec(dllexport)
#else
#define HMMOE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values 0-3 double as process exit codes. */
typedef enum hmmoe_status {
  HMMOE_OK = 0,
  HMMOE_VERIFY_FAILED = 1,
  HMMOE_CONFIG_ERROR = 2,
  HMMOE_RUNTIME_ERROR = 3,
  HMMOE_INVALID_ARGUMENT = 4,
  HMMOE_BUFFER_TOO_SMALL = 5
} hmmoe_status;

typedef struct hmmoe_model hmmoe_model;

typedef struct hmmoe_run_options {
  uint64_t seed;     /* used only when has_seed != 0 */
  int has_seed;
  size_t workers;    /* ablation worker threads; 0 means 1 */
} hmmoe_run_options;

HMMOE_API const char* hmmoe_version(void);
HMMOE_API const char* hmmoe_last_error(void);
/* Dotted config path of the last configuration error, or "". */
HMMOE_API const char* hmmoe_last_error_field(void);

/* Model built from a JSON run configuration (model and hmmoe sections). */
HMMOE_API hmmoe_status hmmoe_model_create(const char* config_json, uint64_t seed, hmmoe_model** out);
HMMOE_API void hmmoe_model_destroy(hmmoe_model* model);
HMMOE_API size_t hmmoe_model_dim(const hmmoe_model* model);
HMMOE_API size_t hmmoe_model_classes(const hmmoe_model* model);

/* visual: [batch, seq_visual, dim], audio: [batch, seq_audio, dim], row-major.
 * logits receives [batch, classes]; logits_capacity counts doubles. */
HMMOE_API hmmoe_status hmmoe_model_forward(const hmmoe_model* model, const double* visual, size_t seq_visual,
                                           const double* audio, size_t seq_audio, size_t batch, double* logits,
                                           size_t logits_capacity);
HMMOE_API hmmoe_status hmmoe_model_ledger_json(const hmmoe_model* model, char* buffer, size_t capacity,
                                               size_t* needed);
HMMOE_API hmmoe_status hmmoe_model_save(const hmmoe_model* model, const char* path);
HMMOE_API hmmoe_status hmmoe_model_load(hmmoe_model* model, const char* path);

/* One training run; writes metrics.csv, utilization.csv, ledger.json and
 * report.json to out_dir (or the config's output_dir when out_dir is NULL).
 * summary, when non-NULL, receives the report.json text. */
HMMOE_API hmmoe_status hmmoe_train(const char* config_path, const char* out_dir, const hmmoe_run_options* options,
                                   char* summary, size_t capacity, size_t* needed);

/* kind: expert_type, rank, expert_count or heterogeneous. */
HMMOE_API hmmoe_status hmmoe_ablate(const char* config_path, const char* kind, const char* out_dir,
                                    const hmmoe_run_options* options, char* summary, size_t capacity,
                                    size_t* needed);

/* scope: gradcheck, invariants, ledger or all. The table is always produced;
 * the status is HMMOE_VERIFY_FAILED when any check fails. */
HMMOE_API hmmoe_status hmmoe_verify(const char* scope, char* table, size_t capacity, size_t* needed);

#ifdef __cplusplus
}
#endif

#endif /* HMMOE_H_ */
