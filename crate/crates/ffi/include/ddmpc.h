#ifndef DDMPC_H
#define DDMPC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum DdmpcStatus {
  DDMPC_STATUS_OK = 0,
  DDMPC_STATUS_NULL_POINTER = 1,
  DDMPC_STATUS_INVALID_ARGUMENT = 2,
  DDMPC_STATUS_DIMENSION_MISMATCH = 3,
  DDMPC_STATUS_INVALID_MATRIX = 4,
  DDMPC_STATUS_CONFIG_ERROR = 5,
  DDMPC_STATUS_INITIAL_INFEASIBLE = 6,
  DDMPC_STATUS_SOLVER_FAILED = 7,
  DDMPC_STATUS_DIVERGED = 8,
  DDMPC_STATUS_IO = 9,
  DDMPC_STATUS_PANIC = 10,
} DdmpcStatus;

/**
 * Multiplier structure of a consistency set.
 */
typedef enum DdmpcMultiplierMode {
  /**
   * One multiplier per sample.
   */
  DDMPC_MULTIPLIER_MODE_FULL = 0,
  /**
   * One multiplier shared by all offline samples.
   */
  DDMPC_MULTIPLIER_MODE_COMMON = 1,
} DdmpcMultiplierMode;

typedef enum DdmpcScheme {
  DDMPC_SCHEME_ROBUST = 0,
  DDMPC_SCHEME_ADAPTIVE = 1,
  DDMPC_SCHEME_STATIC_FROM_T0 = 2,
} DdmpcScheme;

typedef enum DdmpcMode {
  DDMPC_MODE_RECEDING = 0,
  DDMPC_MODE_STATIC = 1,
} DdmpcMode;

/**
 * Receding-horizon controller bound to one experiment and data set.
 */
typedef struct DdmpcController DdmpcController;

/**
 * Offline input-state record.
 */
typedef struct DdmpcData DdmpcData;

/**
 * Resolved experiment: plant, weights, constraints and controller settings.
 */
typedef struct DdmpcExperiment DdmpcExperiment;

/**
 * Set of models consistent with the data.
 */
typedef struct DdmpcSet DdmpcSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into the library on this thread.
 */
const char *ddmpc_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ddmpc_version(void);

/**
 * Built-in experiment (`"suspension"` or `"scalar"`) with default settings.
 */
enum DdmpcStatus ddmpc_experiment_builtin(const char *name, struct DdmpcExperiment **out);

/**
 * Experiment from the text of a TOML configuration file.
 */
enum DdmpcStatus ddmpc_experiment_from_toml(const char *toml, struct DdmpcExperiment **out);

/**
 * State and input dimensions of the experiment's plant.
 */
enum DdmpcStatus ddmpc_experiment_dims(const struct DdmpcExperiment *exp, size_t *n, size_t *m);

/**
 * Initial state of the experiment, written to `x0[0..n]`.
 */
enum DdmpcStatus ddmpc_experiment_x0(const struct DdmpcExperiment *exp, double *x0, size_t n);

/**
 * Simulates the true plant to get one state update. `w` may be null for
 * zero noise.
 */
enum DdmpcStatus ddmpc_experiment_plant_step(const struct DdmpcExperiment *exp,
                                             const double *x,
                                             const double *u,
                                             const double *w,
                                             double *x_next);

void ddmpc_experiment_free(struct DdmpcExperiment *exp);

/**
 * Offline record generated from the experiment's plant and seed.
 */
enum DdmpcStatus ddmpc_data_collect(const struct DdmpcExperiment *exp, struct DdmpcData **out);

/**
 * Record from measured data: `u` is m×t, `x` is n×(t+1) and `g` is the n×n
 * noise bound, all row-major.
 */
enum DdmpcStatus ddmpc_data_new(size_t n,
                                size_t m,
                                size_t t,
                                const double *u,
                                const double *x,
                                const double *g,
                                struct DdmpcData **out);

/**
 * Number of samples `t` in the record.
 */
enum DdmpcStatus ddmpc_data_len(const struct DdmpcData *data, size_t *len);

void ddmpc_data_free(struct DdmpcData *data);

/**
 * Consistency set of all models that explain the record.
 */
enum DdmpcStatus ddmpc_set_new(const struct DdmpcData *data,
                               enum DdmpcMultiplierMode mode,
                               struct DdmpcSet **out);

/**
 * Whether the model `(A, B)` (row-major n×n and n×m) lies in the set.
 */
enum DdmpcStatus ddmpc_set_contains(const struct DdmpcSet *set,
                                    const double *a,
                                    const double *b,
                                    bool *member);

/**
 * Adds the online sample `(x, u, x_next)`; the set can only shrink.
 */
enum DdmpcStatus ddmpc_set_push(struct DdmpcSet *set,
                                const double *x,
                                const double *u,
                                const double *x_next);

void ddmpc_set_free(struct DdmpcSet *set);

/**
 * Controller for `exp` on the offline record `data`, using the experiment's
 * multiplier mode.
 */
enum DdmpcStatus ddmpc_controller_new(const struct DdmpcExperiment *exp,
                                      const struct DdmpcData *data,
                                      enum DdmpcScheme scheme,
                                      struct DdmpcController **out);

/**
 * Computes the input `u[0..m]` for the measured state `x[0..n]`. A failed
 * solve leaves the controller unusable; later calls report that.
 */
enum DdmpcStatus ddmpc_controller_step(struct DdmpcController *ctrl,
                                       const double *x,
                                       size_t n,
                                       double *u,
                                       size_t m);

/**
 * Current mode of the controller.
 */
enum DdmpcStatus ddmpc_controller_mode(const struct DdmpcController *ctrl, enum DdmpcMode *mode);

/**
 * Cost bound `γ` of the most recent solve. Fails with `InvalidArgument` if
 * no program has been solved yet.
 */
enum DdmpcStatus ddmpc_controller_gamma(const struct DdmpcController *ctrl, double *gamma);

/**
 * Number of controller steps taken so far.
 */
enum DdmpcStatus ddmpc_controller_steps(const struct DdmpcController *ctrl, size_t *steps);

void ddmpc_controller_free(struct DdmpcController *ctrl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDMPC_H */
