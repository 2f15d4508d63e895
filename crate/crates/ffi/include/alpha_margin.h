#ifndef ALPHA_MARGIN_H
#define ALPHA_MARGIN_H

/* Generated with cbindgen:0.29.4 */

/* Generated from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum AmStatus {
  AM_STATUS_OK = 0,
  AM_STATUS_NULL_POINTER = 1,
  AM_STATUS_INVALID_PARAMETER = 2,
  AM_STATUS_DOMAIN = 3,
  AM_STATUS_DIMENSION_MISMATCH = 4,
  AM_STATUS_INDEX_OUT_OF_RANGE = 5,
  AM_STATUS_SOLVER = 6,
  AM_STATUS_IO = 7,
  AM_STATUS_FORMAT = 8,
  AM_STATUS_EMPTY = 9,
  /**
   * FRR@FAR target below the impostor resolution; no threshold reported.
   */
  AM_STATUS_UNATTAINABLE = 10,
  AM_STATUS_PANIC = 11,
} AmStatus;

/**
 * Loss family selector for [`am_margin_loss`].
 */
typedef enum AmMarginMode {
  AM_MARGIN_MODE_Q_MARGIN = 0,
  AM_MARGIN_MODE_A3M = 1,
  AM_MARGIN_MODE_COS_FACE = 2,
  AM_MARGIN_MODE_ARC_FACE = 3,
} AmMarginMode;

/**
 * Opaque dataset handle.
 */
typedef struct AmDataset AmDataset;

/**
 * Opaque model handle (embedder plus prototype head).
 */
typedef struct AmModel AmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *am_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *am_version(void);

/**
 * α-softargmax of `theta` (length `k`) against reference weights `q`
 * (null for all ones). Writes the posterior to `out_p` (length `k`) and, if
 * `out_tau` is not null, the threshold τ*.
 *
 * # Safety
 * `theta` and `out_p` must point to `k` `f64`s; `q` to `k` `f64`s or null;
 * `out_tau` to one `f64` or null.
 */
enum AmStatus am_alpha_softargmax(const double *theta,
                                  const double *q,
                                  size_t k,
                                  double alpha,
                                  double *out_p,
                                  double *out_tau);

/**
 * Regularized maximum `softmax_f(θ) = max_p ⟨p, θ⟩ − D_f(p : q)`.
 *
 * # Safety
 * `theta` must point to `k` `f64`s; `q` to `k` `f64`s or null; `out_value`
 * to one `f64`.
 */
enum AmStatus am_alpha_softmax(const double *theta,
                               const double *q,
                               size_t k,
                               double alpha,
                               double *out_value);

/**
 * Fenchel-Young loss of logits `theta` for target `y`. Writes the value and,
 * if `out_grad` is not null, the gradient `p* − e_y` (length `k`).
 *
 * # Safety
 * `theta` must point to `k` `f64`s; `q` to `k` `f64`s or null; `out_value`
 * to one `f64`; `out_grad` to `k` `f64`s or null.
 */
enum AmStatus am_fy_loss(const double *theta,
                         const double *q,
                         size_t k,
                         size_t y,
                         double alpha,
                         double *out_value,
                         double *out_grad);

/**
 * Margin loss over cosine similarities `cosines` (length `k`). `alpha` is
 * ignored by the cross-entropy baselines. Writes the value and, if
 * `out_grad_logits` is not null, the gradient with respect to the logits
 * the loss consumes.
 *
 * # Safety
 * `cosines` must point to `k` `f64`s; `out_value` to one `f64`;
 * `out_grad_logits` to `k` `f64`s or null.
 */
enum AmStatus am_margin_loss(const double *cosines,
                             size_t k,
                             size_t y,
                             enum AmMarginMode mode,
                             double scale,
                             double margin,
                             double alpha,
                             double *out_value,
                             double *out_grad_logits);

/**
 * FRR at the smallest impostor-score threshold whose FAR is at most
 * `far_target`. Returns `AM_STATUS_UNATTAINABLE` (writing the smallest
 * resolvable FAR to `out_far`) when no threshold qualifies.
 *
 * # Safety
 * `genuine` must point to `n_genuine` `f64`s and `impostor` to `n_impostor`;
 * the three outputs must each point to one `f64`.
 */
enum AmStatus am_frr_at_far(const double *genuine,
                            size_t n_genuine,
                            const double *impostor,
                            size_t n_impostor,
                            double far_target,
                            double *out_frr,
                            double *out_threshold,
                            double *out_far);

/**
 * Loads a dataset file into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * storage for one pointer.
 */
enum AmStatus am_dataset_load(const char *path, struct AmDataset **out);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `ds` must be null or a handle from [`am_dataset_load`] not yet freed.
 */
void am_dataset_free(struct AmDataset *ds);

/**
 * Number of rows, feature dimension and identity count.
 *
 * # Safety
 * `ds` must be a live handle; each output must be null or point to one
 * `usize`.
 */
enum AmStatus am_dataset_shape(const struct AmDataset *ds,
                               size_t *out_len,
                               size_t *out_dim,
                               size_t *out_ids);

/**
 * Copies row `i` (length `dim`) to `out_row` and its label to `out_label`.
 *
 * # Safety
 * `ds` must be a live handle; `out_row` must point to `dim` `f64`s;
 * `out_label` must be null or point to one `u32`.
 */
enum AmStatus am_dataset_row(const struct AmDataset *ds,
                             size_t i,
                             double *out_row,
                             size_t dim,
                             uint32_t *out_label);

/**
 * Loads a model checkpoint into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * storage for one pointer.
 */
enum AmStatus am_model_load(const char *path, struct AmModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`am_model_load`] not yet freed.
 */
void am_model_free(struct AmModel *model);

/**
 * Input dimension, embedding dimension and number of prototypes.
 *
 * # Safety
 * `model` must be a live handle; each output must be null or point to one
 * `usize`.
 */
enum AmStatus am_model_shape(const struct AmModel *model,
                             size_t *out_input_dim,
                             size_t *out_embedding_dim,
                             size_t *out_prototypes);

/**
 * Unit-norm embedding of `x` (length `d_in`) written to `out` (length
 * `d_out`).
 *
 * # Safety
 * `model` must be a live handle; `x` must point to `d_in` `f64`s and `out`
 * to `d_out` `f64`s.
 */
enum AmStatus am_model_embed(const struct AmModel *model,
                             const double *x,
                             size_t d_in,
                             double *out,
                             size_t d_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALPHA_MARGIN_H */
