#ifndef EGFLOW_H
#define EGFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define EGFLOW_OK 0

#define EGFLOW_ERR_OTHER 1

/**
 * A required pointer was null or an argument was out of range.
 */
#define EGFLOW_ERR_ARGUMENT 2

#define EGFLOW_ERR_IO 3

#define EGFLOW_ERR_PARSE 4

#define EGFLOW_ERR_DIMS 5

#define EGFLOW_ERR_NONFINITE_LOSS 6

#define EGFLOW_ERR_CHECKPOINT 7

#define EGFLOW_ERR_NUMERICAL 8

#define EGFLOW_ERR_DENSE_BUDGET 9

#define EGFLOW_ERR_DOMAIN 10

/**
 * An internal panic was caught at the boundary.
 */
#define EGFLOW_ERR_PANIC 11

#define EGFLOW_FIELD_LINEAR 0

#define EGFLOW_FIELD_MLP 1

#define EGFLOW_SCHEME_RK4 0

#define EGFLOW_SCHEME_EULER 1

/**
 * A trained field with its smoothing constant and default integrator.
 */
typedef struct EgflowModel EgflowModel;

/**
 * Training settings. Obtain defaults from [`egflow_train_options_default`].
 */
typedef struct EgflowTrainOptions {
  /**
   * `EGFLOW_FIELD_LINEAR` or `EGFLOW_FIELD_MLP`.
   */
  uint32_t field;
  /**
   * Hidden widths of the MLP field; ignored for the linear field.
   */
  const size_t *hidden;
  size_t hidden_len;
  /**
   * Nonzero adds a bias to the linear field.
   */
  uint8_t bias;
  double eps;
  size_t batch_size;
  size_t steps;
  double lr;
  /**
   * Nonzero selects cosine annealing instead of a constant rate.
   */
  uint8_t cosine;
  uint64_t seed;
  /**
   * Integrator stored with the model: `EGFLOW_SCHEME_RK4` or `EGFLOW_SCHEME_EULER`.
   */
  uint32_t scheme;
  size_t integrator_steps;
} EgflowTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *egflow_last_error(void);

/**
 * Defaults: bias-free linear field, eps 0.01, batch 512, 2000 steps, Adam at
 * 5e-4 with a constant rate, seed 0, RK4 with 100 steps.
 */
struct EgflowTrainOptions egflow_train_options_default(void);

/**
 * Trains a model on `count` configurations of `n` labels in `{0..c-1}`.
 *
 * # Safety
 * `labels` must point to `count * n` values, `options` to a valid struct
 * whose `hidden` holds `hidden_len` values, and `out` must be writable.
 */
int32_t egflow_train(const uint32_t *labels,
                     size_t count,
                     size_t n,
                     size_t c,
                     const struct EgflowTrainOptions *options,
                     struct EgflowModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
int32_t egflow_model_load(const char *path, struct EgflowModel **out);

/**
 * Writes a checkpoint file atomically.
 *
 * # Safety
 * `model` must be a live handle and `path` a nul-terminated string.
 */
int32_t egflow_model_save(const struct EgflowModel *model, const char *path);

/**
 * Variable and category counts of the model.
 *
 * # Safety
 * `model` must be a live handle; `n` and `c` must be writable.
 */
int32_t egflow_model_dims(const struct EgflowModel *model, size_t *n, size_t *c);

/**
 * Number of scalar parameters of the field.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
int32_t egflow_model_num_params(const struct EgflowModel *model, size_t *out);

/**
 * Draws `count` configurations into `out_labels` (`count * n` values) with
 * the model's integrator. `out_ties` may be null; otherwise it receives the
 * number of rows rounded at a tie.
 *
 * # Safety
 * `model` must be a live handle and `out_labels` writable for `count * n` values.
 */
int32_t egflow_sample(const struct EgflowModel *model,
                      size_t count,
                      uint64_t seed,
                      uint32_t *out_labels,
                      size_t *out_ties);

/**
 * Importance-sampling lower bound on `log p(alpha)` in nats for one
 * configuration of `n` labels. `out_std_error` receives NaN when
 * `n_samples == 1`; `out_bits_per_dim` and `out_std_error` may be null.
 *
 * # Safety
 * `model` must be a live handle, `alpha` must hold `n` labels and
 * `out_bound` must be writable.
 */
int32_t egflow_loglik(const struct EgflowModel *model,
                      const uint32_t *alpha,
                      size_t n_samples,
                      double mass,
                      uint64_t seed,
                      double *out_bound,
                      double *out_bits_per_dim,
                      double *out_std_error);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void egflow_model_free(struct EgflowModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EGFLOW_H */
