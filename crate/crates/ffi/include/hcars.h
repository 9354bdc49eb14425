#pragma once

/* Generated with cbindgen:0.27.0 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  HCARS_STATUS_OK = 0,
  HCARS_STATUS_NULL_POINTER = 1,
  HCARS_STATUS_INVALID_ARGUMENT = 2,
  HCARS_STATUS_PARSE_ERROR = 3,
  HCARS_STATUS_IO_ERROR = 4,
  HCARS_STATUS_NUMERIC_ERROR = 5,
  /**
   * No counterfactual explanation exists for the queried pair.
   */
  HCARS_STATUS_INFEASIBLE = 6,
  HCARS_STATUS_PRECONDITION_FAILED = 7,
  HCARS_STATUS_BUFFER_TOO_SMALL = 8,
  HCARS_STATUS_INTERNAL_ERROR = 9,
} HcarsStatus;

/**
 * Opaque interaction-matrix handle.
 */
typedef struct HcarsMatrix HcarsMatrix;

/**
 * Opaque surrogate-model handle.
 */
typedef struct HcarsSurrogate HcarsSurrogate;

/**
 * Opaque victim-model handle.
 */
typedef struct HcarsTarget HcarsTarget;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version string; static storage, do not free.
 */
const char *hcars_version(void);

/**
 * Message describing this thread's most recent error; valid until the next
 * failing call on the same thread. Do not free.
 */
const char *hcars_last_error_message(void);

/**
 * Loads and binarizes an interaction dataset.
 * `format` is "movielens-tsv", "pair-csv", or "pair-csv-header".
 */
HcarsStatus hcars_matrix_load(const char *path, const char *format, HcarsMatrix **out);

HcarsStatus hcars_matrix_dims(const HcarsMatrix *matrix,
                              uint32_t *users,
                              uint32_t *items,
                              uint64_t *interactions);

void hcars_matrix_free(HcarsMatrix *matrix);

/**
 * Trains the NCF victim on a matrix.
 */
HcarsStatus hcars_target_train(const HcarsMatrix *train,
                               uint32_t embedding_dim,
                               uint32_t epochs,
                               double lr,
                               uint32_t negatives_per_positive,
                               uint32_t batch_size,
                               uint64_t seed,
                               HcarsTarget **out);

HcarsStatus hcars_target_save(const HcarsTarget *model, const char *path);

HcarsStatus hcars_target_load(const char *path, HcarsTarget **out);

/**
 * Preference score in (0,1).
 */
HcarsStatus hcars_target_score(const HcarsTarget *model, uint32_t user, uint32_t item, double *out);

/**
 * Top-k recommendation ids for a user. `out_items` must hold `k` entries;
 * `out_len` receives the actual count (shorter when few candidates exist).
 */
HcarsStatus hcars_target_top_k(const HcarsTarget *model,
                               const HcarsMatrix *history,
                               uint32_t user,
                               uint32_t k,
                               uint32_t *out_items,
                               uint32_t *out_len);

void hcars_target_free(HcarsTarget *model);

/**
 * Fraction of users whose top-k contains at least one of `targets`.
 */
HcarsStatus hcars_hit_ratio(const HcarsTarget *model,
                            const HcarsMatrix *history,
                            const uint32_t *targets,
                            uint32_t num_targets,
                            uint32_t k,
                            double *out);

/**
 * Greedy counterfactual explanation for a recommended (user, target) pair:
 * the removed history items are written to `out_items` (up to `capacity`).
 * Fails with `HCARS_STATUS_INFEASIBLE` when no subset evicts the target.
 */
HcarsStatus hcars_explain(const HcarsTarget *model,
                          const HcarsMatrix *history,
                          uint32_t user,
                          uint32_t target,
                          uint32_t k,
                          uint64_t seed,
                          uint32_t *out_items,
                          uint32_t capacity,
                          uint32_t *out_len);

/**
 * Trains the neural-logic surrogate from an observed matrix plus an
 * optional counterfactual archive (newline-delimited JSON; pass null for
 * none).
 */
HcarsStatus hcars_surrogate_train(const HcarsMatrix *observed,
                                  const char *cf_archive_path,
                                  double lambda_cf,
                                  double lambda_reg,
                                  uint32_t embedding_dim,
                                  uint32_t hidden_dim,
                                  uint32_t epochs,
                                  uint64_t seed,
                                  HcarsSurrogate **out);

/**
 * Horn-clause truth score of an (unrated) item for a user.
 */
HcarsStatus hcars_surrogate_score(const HcarsSurrogate *model,
                                  uint32_t user,
                                  uint32_t item,
                                  double *out);

void hcars_surrogate_free(HcarsSurrogate *model);

/**
 * Runs the full poisoning loop against a trained surrogate and writes the
 * crafted fake profiles as a newline-delimited JSON archive.
 */
HcarsStatus hcars_attack_run(const HcarsSurrogate *surrogate,
                             const HcarsMatrix *observed,
                             const uint32_t *targets,
                             uint32_t num_targets,
                             uint32_t budget,
                             uint32_t profile_size,
                             uint64_t seed,
                             const char *out_archive_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
