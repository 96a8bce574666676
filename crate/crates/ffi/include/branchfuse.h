#ifndef BRANCHFUSE_H
#define BRANCHFUSE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BfStatus {
  BF_STATUS_OK = 0,
  BF_STATUS_NULL_ARGUMENT = 1,
  BF_STATUS_INVALID_ARGUMENT = 2,
  BF_STATUS_IO = 3,
  BF_STATUS_BAD_MAGIC = 4,
  BF_STATUS_UNSUPPORTED_VERSION = 5,
  BF_STATUS_TRUNCATED = 6,
  BF_STATUS_CHECKSUM_MISMATCH = 7,
  BF_STATUS_MALFORMED_HEADER = 8,
  BF_STATUS_MODEL_MISMATCH = 9,
  /**
   * Collapse requested on a checkpoint that is not fully joined.
   */
  BF_STATUS_NOT_JOINED = 10,
  BF_STATUS_NUMERICAL_ERROR = 11,
  BF_STATUS_VERIFICATION_FAILED = 12,
  BF_STATUS_INTERNAL = 13,
} BfStatus;

/**
 * Joining curve selector for [`bf_lambda_at`].
 */
typedef enum BfSchedule {
  BF_SCHEDULE_LINEAR = 0,
  BF_SCHEDULE_COSINE = 1,
  BF_SCHEDULE_EXPONENTIAL = 2,
  BF_SCHEDULE_SQRT = 3,
} BfSchedule;

/**
 * Opaque model handle.
 */
typedef struct BfModel BfModel;

/**
 * Shape summary of a loaded model.
 */
typedef struct BfModelInfo {
  bool deployed;
  size_t channels;
  size_t image_size;
  size_t num_classes;
  size_t dim;
  size_t heads;
  size_t blocks;
  /**
   * Parallel branches per block (before collapse for deployed models).
   */
  size_t branches;
  uint64_t step;
  double lambda;
} BfModelInfo;

typedef struct BfVerifyReport {
  size_t probes;
  uint64_t seed;
  double max_abs_err;
  double max_rel_err;
  bool pass;
} BfVerifyReport;

typedef struct BfFlopsInput {
  uint64_t dim;
  uint64_t heads;
  uint64_t tokens;
  uint64_t ffn_hidden;
  uint64_t patch_dim;
  uint64_t num_classes;
  uint64_t deploy_blocks;
  uint64_t branches;
} BfFlopsInput;

/**
 * FLOPs at 2 per multiply-accumulate.
 */
typedef struct BfFlopsReport {
  uint64_t attn_scores_traditional;
  uint64_t attn_scores_fused;
  uint64_t fused_scores_per_head_literal;
  uint64_t attn_value_output;
  uint64_t ffn;
  uint64_t patch_embed;
  uint64_t head;
  uint64_t baseline_total;
  uint64_t deployed_total;
  uint64_t params_baseline;
  uint64_t params_multi_branch;
  uint64_t params_deployed;
} BfFlopsReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *bf_version(void);

/**
 * Message of the last failed call on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *bf_last_error(void);

/**
 * Loads a checkpoint of either kind. `*out` receives a handle to release
 * with [`bf_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BfStatus bf_model_load(const char *path, struct BfModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum BfStatus bf_model_save(const struct BfModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle from this library, freed once.
 */
void bf_model_free(struct BfModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum BfStatus bf_model_info(const struct BfModel *model, struct BfModelInfo *out);

/**
 * Logits for `batch` images stored contiguously as `channels × size × size`
 * doubles each. `lambda` is used by multi-branch models only; pass a NaN to
 * use the checkpoint's stored λ. `logits` must hold `batch · num_classes`.
 *
 * # Safety
 * `images` must point to `images_len` doubles and `logits` to `logits_len`.
 */
enum BfStatus bf_model_forward(const struct BfModel *model,
                               const double *images,
                               size_t images_len,
                               size_t batch,
                               double lambda,
                               double *logits,
                               size_t logits_len);

/**
 * Collapses a multi-branch model into a new deployed handle. Refuses with
 * [`BfStatus::NotJoined`] when the stored λ is below 1, unless `force`.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum BfStatus bf_model_collapse(const struct BfModel *model,
                                bool absorb,
                                bool force,
                                struct BfModel **out);

/**
 * Compares a multi-branch model at λ = 1 with a deployed one on `probes`
 * seeded random inputs. Returns [`BfStatus::VerificationFailed`] (with
 * `*out` filled) when the tolerance is exceeded.
 *
 * # Safety
 * All pointers must be valid.
 */
enum BfStatus bf_verify(const struct BfModel *multi_branch,
                        const struct BfModel *deployed,
                        size_t probes,
                        uint64_t seed,
                        struct BfVerifyReport *out);

/**
 * λ at `step` for the joining curve `kind` (a [`BfSchedule`] value).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum BfStatus bf_lambda_at(uint32_t kind,
                           uint64_t join_start_step,
                           uint64_t warmup_steps,
                           uint64_t adjust_steps,
                           uint64_t step,
                           double *out);

/**
 * Pre-softmax divisor `√(1 + (n-1)λ²)·√d_k`.
 */
double bf_rectified_scale(double lambda, size_t branches, size_t head_dim);

/**
 * Closed-form FLOP and parameter counts.
 *
 * # Safety
 * `input` and `out` must be valid pointers.
 */
enum BfStatus bf_flops(const struct BfFlopsInput *input, struct BfFlopsReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRANCHFUSE_H */
