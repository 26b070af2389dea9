#ifndef BELIEFPLAN_H
#define BELIEFPLAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BpStatus {
  BP_STATUS_OK = 0,
  BP_STATUS_NULL_POINTER = 1,
  BP_STATUS_INVALID_UTF8 = 2,
  BP_STATUS_CONFIG = 3,
  BP_STATUS_IO = 4,
  BP_STATUS_NUMERICAL = 5,
  BP_STATUS_FORMAT = 6,
  BP_STATUS_PANIC = 7,
} BpStatus;

typedef struct BpConfig BpConfig;

typedef struct BpModel BpModel;

typedef struct BpScenario BpScenario;

/**
 * Outcome of one closed-loop episode. Prediction metrics are NaN when the
 * episode had nothing to score.
 */
typedef struct BpEpisodeSummary {
  bool success;
  double reward;
  uint64_t task_time;
  double log_divergence;
  double min_ade;
  double consistency;
  double score_accuracy;
  uint64_t decisions;
} BpEpisodeSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The caller owns
 * the string and releases it with [`bp_string_free`].
 */
char *bp_last_error(void);

/**
 * # Safety
 * `s` must come from this library, or be null.
 */
void bp_string_free(char *s);

/**
 * Library version; a static string owned by the library.
 */
const char *bp_version(void);

/**
 * # Safety
 * `out` must be valid for a write.
 */
enum BpStatus bp_config_default(struct BpConfig **out);

/**
 * Parses a TOML run configuration; missing fields take their defaults.
 *
 * # Safety
 * `toml` must be a nul-terminated string and `out` valid for a write.
 */
enum BpStatus bp_config_from_toml(const char *toml, struct BpConfig **out);

/**
 * Hex config hash; release with [`bp_string_free`]. Null if `cfg` is null.
 *
 * # Safety
 * `cfg` must be a live handle or null.
 */
char *bp_config_hash(const struct BpConfig *cfg);

/**
 * # Safety
 * `cfg` must be a live handle or null; it is invalid afterwards.
 */
void bp_config_free(struct BpConfig *cfg);

/**
 * Freshly initialized model.
 *
 * # Safety
 * `cfg` must be a live handle and `out` valid for a write.
 */
enum BpStatus bp_model_new(const struct BpConfig *cfg, uint64_t seed, struct BpModel **out);

/**
 * # Safety
 * `cfg` must be a live handle, `path` a nul-terminated string and `out`
 * valid for a write.
 */
enum BpStatus bp_model_load(const struct BpConfig *cfg, const char *path, struct BpModel **out);

/**
 * # Safety
 * Handles must be live and `path` a nul-terminated string.
 */
enum BpStatus bp_model_save(const struct BpModel *model,
                            const struct BpConfig *cfg,
                            const char *path,
                            uint64_t seed);

/**
 * # Safety
 * `model` must be a live handle or null; it is invalid afterwards.
 */
void bp_model_free(struct BpModel *model);

/**
 * Generates a synthetic scenario of `kind` (`intersection`, `merge` or
 * `lane-follow`).
 *
 * # Safety
 * `cfg` must be a live handle, `kind` a nul-terminated string and `out`
 * valid for a write.
 */
enum BpStatus bp_scenario_generate(const struct BpConfig *cfg,
                                   const char *kind,
                                   uint64_t seed,
                                   struct BpScenario **out);

/**
 * Loads and validates a scenario JSON file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid for a write.
 */
enum BpStatus bp_scenario_load(const char *path, struct BpScenario **out);

/**
 * # Safety
 * `scenario` must be a live handle and `path` a nul-terminated string.
 */
enum BpStatus bp_scenario_save(const struct BpScenario *scenario, const char *path);

/**
 * Number of non-ego agents, or 0 for a null handle.
 *
 * # Safety
 * `scenario` must be a live handle or null.
 */
size_t bp_scenario_agent_count(const struct BpScenario *scenario);

/**
 * # Safety
 * `scenario` must be a live handle or null; it is invalid afterwards.
 */
void bp_scenario_free(struct BpScenario *scenario);

/**
 * Runs one closed-loop episode with the evaluation policy of `cfg`.
 *
 * # Safety
 * Handles must be live and `out` valid for a write.
 */
enum BpStatus bp_run_episode(const struct BpConfig *cfg,
                             const struct BpModel *model,
                             const struct BpScenario *scenario,
                             uint64_t seed,
                             struct BpEpisodeSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BELIEFPLAN_H */
