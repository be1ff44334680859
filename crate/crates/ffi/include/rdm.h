#ifndef RDM_H
#define RDM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RdmDecodeMode {
  RDM_DECODE_MODE_ARGMAX = 0,
  RDM_DECODE_MODE_SAMPLE = 1,
} RdmDecodeMode;

typedef enum RdmNoiseKind {
  RDM_NOISE_KIND_UNIFORM = 0,
  /**
   * Mask at id `K - 1`.
   */
  RDM_NOISE_KIND_ABSORBING = 1,
  /**
   * Probabilities supplied by the caller.
   */
  RDM_NOISE_KIND_CUSTOM = 2,
} RdmNoiseKind;

/**
 * Result codes.
 */
typedef enum RdmStatus {
  RDM_STATUS_OK = 0,
  RDM_STATUS_NULL_POINTER = 1,
  RDM_STATUS_INVALID_ARGUMENT = 2,
  RDM_STATUS_SHAPE_MISMATCH = 3,
  RDM_STATUS_SINGULAR = 4,
  RDM_STATUS_IMPOSSIBLE = 5,
  RDM_STATUS_FORMAT = 6,
  RDM_STATUS_IO = 7,
  RDM_STATUS_CONFIG = 8,
  RDM_STATUS_DIVERGENCE = 9,
  RDM_STATUS_PANIC = 10,
} RdmStatus;

typedef enum RdmStrategy {
  RDM_STRATEGY_STOCHASTIC = 0,
  RDM_STRATEGY_ADAPTIVE_COSINE = 1,
  RDM_STRATEGY_ADAPTIVE_LINEAR = 2,
} RdmStrategy;

/**
 * A loaded checkpoint: sampling weights, schedule and noise.
 */
typedef struct RdmModel RdmModel;

/**
 * A validated noise schedule.
 */
typedef struct RdmSchedule RdmSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *rdm_last_error(void);

/**
 * Linear schedule `alpha_t = 1 - t / T`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum RdmStatus rdm_schedule_linear(size_t steps, struct RdmSchedule **out);

/**
 * Schedule from `len` alpha values (`alpha[0] = 1`, strictly decreasing).
 *
 * # Safety
 * `alpha` must point to `len` doubles and `out` to storage for one handle.
 */
enum RdmStatus rdm_schedule_from_alpha(const double *alpha, size_t len, struct RdmSchedule **out);

/**
 * # Safety
 * `sched` must be null or a handle from an `rdm_schedule_*` constructor.
 */
void rdm_schedule_free(struct RdmSchedule *sched);

/**
 * Number of steps `T`.
 *
 * # Safety
 * `sched` must be a live schedule handle and `out` writable.
 */
enum RdmStatus rdm_schedule_steps(const struct RdmSchedule *sched, size_t *out);

/**
 * `alpha_t` for `t` in `0..=T`.
 *
 * # Safety
 * `sched` must be a live schedule handle and `out` writable.
 */
enum RdmStatus rdm_schedule_alpha(const struct RdmSchedule *sched, size_t t, double *out);

/**
 * Routing coefficients for the jump `t -> s` given `q_noise(x_t)`.
 *
 * # Safety
 * `sched` must be a live schedule handle; outputs must be writable.
 */
enum RdmStatus rdm_schedule_lambda(const struct RdmSchedule *sched,
                                   size_t s,
                                   size_t t,
                                   double noise_mass,
                                   double *lambda1,
                                   double *lambda2);

/**
 * Writes `q(x_s | x_t, x_0)` into `out[0..K]`. `probs` is read only for
 * custom noise and must then hold `K` values.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum RdmStatus rdm_backward_branch(const struct RdmSchedule *sched,
                                   enum RdmNoiseKind kind,
                                   size_t k,
                                   const double *probs,
                                   size_t x_t,
                                   size_t x0,
                                   size_t s,
                                   size_t t,
                                   double *out,
                                   size_t out_len);

/**
 * Loads a checkpoint, preferring its EMA weights.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum RdmStatus rdm_model_load(const char *path, struct RdmModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`rdm_model_load`].
 */
void rdm_model_free(struct RdmModel *model);

/**
 * Vocabulary size, maximum sequence length, step count and whether the
 * model expects a condition.
 *
 * # Safety
 * `model` must be live; every non-null output must be writable.
 */
enum RdmStatus rdm_model_info(const struct RdmModel *model,
                              size_t *vocab,
                              size_t *max_len,
                              size_t *steps,
                              bool *conditioned);

/**
 * Per-position predictions as a row-major `n x K` matrix.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `cond` may be null when
 * `cond_len` is 0.
 */
enum RdmStatus rdm_model_predict(const struct RdmModel *model,
                                 const size_t *tokens,
                                 size_t n,
                                 size_t t,
                                 const size_t *cond,
                                 size_t cond_len,
                                 double *out,
                                 size_t out_len);

/**
 * Samples one sequence of length `n` with `steps` evenly spaced reverse steps.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `cond` may be null when
 * `cond_len` is 0.
 */
enum RdmStatus rdm_model_sample(const struct RdmModel *model,
                                size_t n,
                                size_t steps,
                                enum RdmStrategy strategy,
                                double tau,
                                enum RdmDecodeMode mode,
                                const size_t *cond,
                                size_t cond_len,
                                uint64_t seed,
                                size_t *out,
                                size_t out_len);

/**
 * Runs the full verification suite with `draws` Monte Carlo samples per
 * statistical test. `passed` receives the number of passing checks and
 * `total` the number run.
 *
 * # Safety
 * Outputs must be writable.
 */
enum RdmStatus rdm_verify(uint64_t seed, size_t draws, size_t *passed, size_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RDM_H */
