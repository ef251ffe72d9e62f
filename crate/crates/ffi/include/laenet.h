#ifndef LAENET_H
#define LAENET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum LaenetStatus {
  LAENET_STATUS_OK = 0,
  LAENET_STATUS_NULL_POINTER = 1,
  LAENET_STATUS_INVALID_ARGUMENT = 2,
  LAENET_STATUS_PARSE = 3,
  LAENET_STATUS_INFEASIBLE = 4,
  LAENET_STATUS_OUT_OF_RANGE = 5,
  LAENET_STATUS_EPISODE_FINISHED = 6,
  LAENET_STATUS_INTERNAL = 7,
} LaenetStatus;

typedef struct LaenetEnv LaenetEnv;

typedef struct LaenetScenario LaenetScenario;

typedef struct LaenetSolution LaenetSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *laenet_last_error(void);

/**
 * Static, NUL-terminated version string.
 */
const char *laenet_version(void);

/**
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum LaenetStatus laenet_scenario_default(struct LaenetScenario **out);

/**
 * Parse and validate a scenario from TOML text.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum LaenetStatus laenet_scenario_from_toml(const char *toml, struct LaenetScenario **out);

/**
 * # Safety
 * `s` must come from a scenario constructor and not be used afterwards.
 */
void laenet_scenario_free(struct LaenetScenario *s);

/**
 * # Safety
 * `s` must be a live scenario handle; `out` writable.
 */
enum LaenetStatus laenet_scenario_num_users(const struct LaenetScenario *s, size_t *out);

/**
 * Solve resolutions and powers at `pose` (x, y, z in m; the scenario start
 * pose when null). A negative `zeta` keeps the scenario's own weight.
 *
 * # Safety
 * `s` live; `pose` null or three readable doubles; `out` writable.
 */
enum LaenetStatus laenet_arpo_solve(const struct LaenetScenario *s,
                                    double zeta,
                                    const double *pose,
                                    struct LaenetSolution **out);

/**
 * # Safety
 * `s` must come from `laenet_arpo_solve` and not be used afterwards.
 */
void laenet_solution_free(struct LaenetSolution *s);

/**
 * # Safety
 * `s` live; `out` writable.
 */
enum LaenetStatus laenet_solution_num_users(const struct LaenetSolution *s, size_t *out);

/**
 * Transmit power of user `idx` in W.
 *
 * # Safety
 * `s` live; `out` writable.
 */
enum LaenetStatus laenet_solution_power(const struct LaenetSolution *s, size_t idx, double *out);

/**
 * Image resolution of user `idx` as a pixel count.
 *
 * # Safety
 * `s` live; `out` writable.
 */
enum LaenetStatus laenet_solution_resolution(const struct LaenetSolution *s,
                                             size_t idx,
                                             uint64_t *out);

/**
 * Largest per-user latency of the allocation, s.
 *
 * # Safety
 * `s` live; `out` writable.
 */
enum LaenetStatus laenet_solution_max_latency(const struct LaenetSolution *s, double *out);

/**
 * # Safety
 * `s` live; `out` writable.
 */
enum LaenetStatus laenet_solution_total_power(const struct LaenetSolution *s, double *out);

/**
 * # Safety
 * `s` live; `out` writable.
 */
enum LaenetStatus laenet_solution_objective(const struct LaenetSolution *s, double *out);

/**
 * Shannon rate B log2(1 + P g / σ²) in bit/s.
 *
 * # Safety
 * `out` writable.
 */
enum LaenetStatus laenet_rate_bps(double p_w,
                                  double gain,
                                  double noise_w,
                                  double bandwidth_hz,
                                  double *out);

/**
 * Upload time of `payload_bits` at a constant rate, s.
 *
 * # Safety
 * `out` writable.
 */
enum LaenetStatus laenet_static_uplink_time(double payload_bits,
                                            double bandwidth_hz,
                                            double p_w,
                                            double gain,
                                            double noise_w,
                                            double *out);

/**
 * New episode over a fixed allocation. Both inputs are copied.
 *
 * # Safety
 * `s`, `sol` live; `out` writable.
 */
enum LaenetStatus laenet_env_new(const struct LaenetScenario *s,
                                 const struct LaenetSolution *sol,
                                 uint64_t seed,
                                 struct LaenetEnv **out);

/**
 * # Safety
 * `e` must come from `laenet_env_new` and not be used afterwards.
 */
void laenet_env_free(struct LaenetEnv *e);

/**
 * Advance one slot with displacement (dx, dy, dz) in m; out-of-range moves
 * are clipped. `reward` and `done` may be null.
 *
 * # Safety
 * `e` live; `reward`, `done` null or writable.
 */
enum LaenetStatus laenet_env_step(struct LaenetEnv *e,
                                  double dx,
                                  double dy,
                                  double dz,
                                  double *reward,
                                  bool *done);

/**
 * Current UAV pose into `out[0..3]`.
 *
 * # Safety
 * `e` live; `out` points to three writable doubles.
 */
enum LaenetStatus laenet_env_pose(const struct LaenetEnv *e, double *out);

/**
 * Max latency of a finished episode, s.
 *
 * # Safety
 * `e` live; `out` writable.
 */
enum LaenetStatus laenet_env_max_latency(const struct LaenetEnv *e, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAENET_H */
