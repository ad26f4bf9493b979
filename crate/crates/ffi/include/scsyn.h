#ifndef SCSYN_H
#define SCSYN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum {
  SCSYN_STATUS_OK = 0,
  SCSYN_STATUS_NULL_POINTER = 1,
  SCSYN_STATUS_INVALID_UTF8 = 2,
  SCSYN_STATUS_CONFIG = 3,
  SCSYN_STATUS_SPEC = 4,
  SCSYN_STATUS_INFEASIBLE = 5,
  SCSYN_STATUS_NON_CONVERGENCE = 6,
  SCSYN_STATUS_VERSION_MISMATCH = 7,
  SCSYN_STATUS_DIMENSION = 8,
  SCSYN_STATUS_MISSING_NOISE = 9,
  SCSYN_STATUS_IO = 10,
  SCSYN_STATUS_INTERNAL = 11,
  SCSYN_STATUS_PANIC = 12,
} ScsynStatus;

/**
 * Refined controller loaded from a bundle or synthesized from a config.
 */
typedef struct ScsynController ScsynController;

/**
 * Translated scLTL specification.
 */
typedef struct ScsynDfa ScsynDfa;

/**
 * Closed-loop run of a controller: DFA state, reduced state and the last
 * measurement.
 */
typedef struct ScsynSession ScsynSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *scsyn_last_error(void);

/**
 * Translates `formula` over the atomic propositions `aps[0..n_aps]`.
 * Letters passed to [`scsyn_dfa_step`] have bit `i` set when `aps[i]` holds.
 *
 * # Safety
 * `formula` and each `aps[i]` must be NUL-terminated strings; `out` must be
 * writable.
 */
ScsynStatus scsyn_dfa_new(const char *formula,
                          const char *const *aps,
                          size_t n_aps,
                          ScsynDfa **out);

/**
 * Loads a DFA from its JSON export.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
ScsynStatus scsyn_dfa_from_json(const char *json, ScsynDfa **out);

/**
 * # Safety
 * `dfa` must come from this library and not be used afterwards.
 */
void scsyn_dfa_free(ScsynDfa *dfa);

/**
 * Number of states, initial state and number of atomic propositions.
 *
 * # Safety
 * `dfa` must be a live handle; non-null outputs must be writable.
 */
ScsynStatus scsyn_dfa_info(const ScsynDfa *dfa,
                           size_t *num_states,
                           size_t *initial,
                           size_t *num_aps);

/**
 * Successor of state `q` on `letter`.
 *
 * # Safety
 * `dfa` must be a live handle; `next` must be writable.
 */
ScsynStatus scsyn_dfa_step(const ScsynDfa *dfa, size_t q, uint32_t letter, size_t *next);

/**
 * 1 if `q` is accepting, 0 if not, -1 on a bad handle or state.
 *
 * # Safety
 * `dfa` must be a live handle or null.
 */
int scsyn_dfa_is_accepting(const ScsynDfa *dfa, size_t q);

/**
 * Reads a controller bundle written by `scsyn synthesize`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
ScsynStatus scsyn_controller_load(const char *path, ScsynController **out);

/**
 * Runs the synthesis pipeline on a TOML config, without deployment runs.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
ScsynStatus scsyn_controller_synthesize(const char *config_toml, ScsynController **out);

/**
 * # Safety
 * `c` must come from this library and not be used afterwards. Sessions
 * keep their own reference and stay valid.
 */
void scsyn_controller_free(ScsynController *c);

/**
 * State, input and noise dimensions of the controlled plant. The noise
 * dimension is 0 unless the controller tracks a reduced-order model.
 *
 * # Safety
 * `c` must be a live handle; non-null outputs must be writable.
 */
ScsynStatus scsyn_controller_dims(const ScsynController *c, size_t *n_x, size_t *n_u, size_t *n_w);

/**
 * Robust lower bound on the satisfaction probability from `x0`.
 *
 * # Safety
 * `c` must be a live handle, `x0` must hold `n` values and `value` must be
 * writable.
 */
ScsynStatus scsyn_controller_value_at(const ScsynController *c,
                                      const double *x0,
                                      size_t n,
                                      double *value);

/**
 * Starts a run at `x0`. `seed` drives the noise coupling of reduced-order
 * controllers.
 *
 * # Safety
 * `c` must be a live handle, `x0` must hold `n` values and `out` must be
 * writable.
 */
ScsynStatus scsyn_session_new(const ScsynController *c,
                              const double *x0,
                              size_t n,
                              uint64_t seed,
                              ScsynSession **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void scsyn_session_free(ScsynSession *s);

/**
 * Input for the measured state `x`, written to `u[0..m]`. `clamped` is set
 * to 1 when the input had to be clipped to the input box.
 *
 * # Safety
 * `s` must be a live handle, `x` must hold `n` values and `u` room for `m`.
 */
ScsynStatus scsyn_session_input(ScsynSession *s,
                                const double *x,
                                size_t n,
                                double *u,
                                size_t m,
                                int *clamped);

/**
 * Advances the session on the next measured state. Reduced-order
 * controllers also need the normalized (standard normal) disturbance `w`
 * that drove the step; others accept a null `w` with `n_w = 0`.
 *
 * # Safety
 * `s` must be a live handle, `x_next` must hold `n` values and `w` `n_w`.
 */
ScsynStatus scsyn_session_observe(ScsynSession *s,
                                  const double *x_next,
                                  size_t n,
                                  const double *w,
                                  size_t n_w);

/**
 * Current DFA state and flags: `accepting` once the specification holds,
 * `breach` once the simulation relation was left.
 *
 * # Safety
 * `s` must be a live handle; non-null outputs must be writable.
 */
ScsynStatus scsyn_session_status(const ScsynSession *s, size_t *q, int *accepting, int *breach);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCSYN_H */
