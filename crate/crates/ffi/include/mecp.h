#ifndef MECP_H
#define MECP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MecpStatus {
  MECP_STATUS_OK = 0,
  MECP_STATUS_NULL_POINTER = 1,
  MECP_STATUS_INVALID_UTF8 = 2,
  MECP_STATUS_CONFIG_ERROR = 3,
  MECP_STATUS_INVARIANT_VIOLATION = 4,
  MECP_STATUS_FINISHED = 5,
  MECP_STATUS_IO_ERROR = 6,
  MECP_STATUS_INVALID_ARGUMENT = 7,
  MECP_STATUS_PANIC = 8,
} MecpStatus;

// Parsed scenario.
typedef struct MecpScenario MecpScenario;

// One running simulation.
typedef struct MecpSimulation MecpSimulation;

// Metrics for one completed round.
typedef struct MecpRoundMetrics {
  uint32_t round;
  uint32_t frames_sent;
  uint32_t frames_delivered;
  uint32_t aggregates_sent;
  uint32_t aggregates_delivered;
  uint32_t ch_count;
  uint32_t alive_count;
  uint32_t orphan_count;
  uint32_t recovery_frames_lost;
  uint32_t promotions;
  uint32_t clustering_iterations_max;
  double delivery_ratio;
  double aggregate_delivery_ratio;
  double energy_consumed_j;
} MecpRoundMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread. Valid until the next
// failing call on the same thread; empty if nothing has failed.
const char *mecp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *mecp_version(void);

// Parse a scenario document.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum MecpStatus mecp_scenario_parse(const char *text, struct MecpScenario **out);

// Seed at `index` in the scenario's seed list.
//
// # Safety
// `scenario` must come from [`mecp_scenario_parse`]; `out` must be valid.
enum MecpStatus mecp_scenario_seed(const struct MecpScenario *scenario,
                                   size_t index,
                                   uint64_t *out);

// Number of seeds in the scenario, or 0 for a null handle.
//
// # Safety
// `scenario` must be null or come from [`mecp_scenario_parse`].
size_t mecp_scenario_seed_count(const struct MecpScenario *scenario);

// # Safety
// `scenario` must be null or come from [`mecp_scenario_parse`], and must not
// be used afterwards.
void mecp_scenario_free(struct MecpScenario *scenario);

// Build a simulation of `scenario` for one seed. Trace recording is
// enabled when `trace` is true.
//
// # Safety
// `scenario` must come from [`mecp_scenario_parse`]; `out` must be valid.
enum MecpStatus mecp_sim_new(const struct MecpScenario *scenario,
                             uint64_t seed,
                             bool trace,
                             struct MecpSimulation **out);

// Run the next round. Returns `Finished` once every round has run.
//
// # Safety
// `sim` must come from [`mecp_sim_new`]; `out` must be valid.
enum MecpStatus mecp_sim_run_round(struct MecpSimulation *sim, struct MecpRoundMetrics *out);

// Write the recorded trace as JSON lines to `path`.
//
// # Safety
// `sim` must come from [`mecp_sim_new`]; `path` must be a NUL-terminated string.
enum MecpStatus mecp_sim_write_trace(const struct MecpSimulation *sim, const char *path);

// # Safety
// `sim` must be null or come from [`mecp_sim_new`], and must not be used
// afterwards.
void mecp_sim_free(struct MecpSimulation *sim);

// Upper bound on Phase II iterations for `p_min`.
//
// # Safety
// `out` must be valid.
enum MecpStatus mecp_max_iterations(double p_min, uint32_t *out);

// Initial cluster-head probability for residual energy `e_res` out of
// `e_max` and velocity factor `vf`.
//
// # Safety
// `out` must be valid.
enum MecpStatus mecp_compute_ch_prob(double k_fraction,
                                     double p_min,
                                     double e_max,
                                     double e_res,
                                     double vf,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MECP_H */
