#ifndef PRT_H
#define PRT_H

/* Generated by cbindgen from prt-ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PrtStatus {
  PRT_STATUS_OK = 0,
  PRT_STATUS_NULL_POINTER = 1,
  PRT_STATUS_INVALID_ARGUMENT = 2,
  PRT_STATUS_CONFIG = 3,
  PRT_STATUS_STAGE = 4,
  PRT_STATUS_IO = 5,
  PRT_STATUS_PANIC = 6,
} PrtStatus;

/**
 * Experiment configuration.
 */
typedef struct PrtExperiment PrtExperiment;

/**
 * A generated comblock family.
 */
typedef struct PrtFamily PrtFamily;

/**
 * Source data, learned representation and ε model for one `(seed, N_S)`.
 */
typedef struct PrtStage PrtStage;

/**
 * Evaluation rewards of the three offline planners on one cell.
 */
typedef struct PrtCellResult {
  double prt_mean;
  double prt_stderr;
  double lcb_mean;
  double lcb_stderr;
  double lsvi_mean;
  double lsvi_stderr;
} PrtCellResult;

/**
 * Inputs of the pointwise transfer-error bound.
 */
typedef struct PrtEpsilonParams {
  double alpha_max;
  size_t num_sources;
  size_t n_source;
  size_t dim;
  double delta;
  double log_phi;
  double log_upsilon;
} PrtEpsilonParams;

/**
 * Outcome of the tabular checks on one seed.
 */
typedef struct PrtTabularCheck {
  bool average_error_holds;
  size_t target_covered;
  size_t target_total;
  size_t local_covered;
  size_t local_total;
  bool pessimism_holds;
} PrtTabularCheck;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *prt_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *prt_version(void);

/**
 * Default comblock experiment.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum PrtStatus prt_experiment_new(struct PrtExperiment **out);

/**
 * Experiment from a JSON config document; missing fields take defaults.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` valid for one handle.
 */
enum PrtStatus prt_experiment_from_json(const char *json, struct PrtExperiment **out);

/**
 * # Safety
 * `exp` must be null or a handle from this library not yet freed.
 */
void prt_experiment_free(struct PrtExperiment *exp);

/**
 * # Safety
 * `exp` must be a live handle and `out` valid for one handle.
 */
enum PrtStatus prt_family_generate(const struct PrtExperiment *exp,
                                   uint64_t seed,
                                   struct PrtFamily **out);

/**
 * Serialized family as a newly allocated string; release it with
 * [`prt_string_free`].
 *
 * # Safety
 * `family` must be a live handle and `out` valid for one pointer.
 */
enum PrtStatus prt_family_to_json(const struct PrtFamily *family, char **out);

/**
 * # Safety
 * `family` must be null or a handle from this library not yet freed.
 */
void prt_family_free(struct PrtFamily *family);

/**
 * # Safety
 * `s` must be null or a string returned by this library not yet freed.
 */
void prt_string_free(char *s);

/**
 * Collects source data, learns the representation and builds the ε model.
 *
 * # Safety
 * `exp` must be a live handle and `out` valid for one handle.
 */
enum PrtStatus prt_stage_build(const struct PrtExperiment *exp,
                               uint64_t seed,
                               size_t n_source,
                               struct PrtStage **out);

/**
 * Feature-map index chosen at step `h` (1-based).
 *
 * # Safety
 * `stage` must be a live handle and `out` valid for one value.
 */
enum PrtStatus prt_stage_chosen_map(const struct PrtStage *stage, size_t h, size_t *out);

/**
 * Whether every step picked a relabelling of the exact decoder.
 *
 * # Safety
 * `stage` must be a live handle and `out` valid for one value.
 */
enum PrtStatus prt_stage_recovered_decoder(const struct PrtStage *stage, bool *out);

/**
 * Plans PRT, RT-LSVI-LCB and RT-LSVI on `n` target trajectories and
 * evaluates each.
 *
 * # Safety
 * `stage` and `exp` must be live handles and `out` valid for one result.
 */
enum PrtStatus prt_stage_run_cell(const struct PrtStage *stage,
                                  const struct PrtExperiment *exp,
                                  size_t n,
                                  struct PrtCellResult *out);

/**
 * # Safety
 * `stage` must be null or a handle from this library not yet freed.
 */
void prt_stage_free(struct PrtStage *stage);

/**
 * Transfer-error bound at effective density `d_h`, clipped to 1.
 *
 * # Safety
 * `params` must point to one readable struct and `out` to one writable value.
 */
enum PrtStatus prt_epsilon_bound(const struct PrtEpsilonParams *params, double d_h, double *out);

/**
 * Runs the tabular bound checks of the experiment's validation setting on
 * one seed.
 *
 * # Safety
 * `exp` must be a live handle and `out` valid for one result.
 */
enum PrtStatus prt_tabular_check(const struct PrtExperiment *exp,
                                 uint64_t seed,
                                 struct PrtTabularCheck *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRT_H */
