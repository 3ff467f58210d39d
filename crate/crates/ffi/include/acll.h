#ifndef ACLL_H
#define ACLL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AcllStatus {
  ACLL_STATUS_OK = 0,
  ACLL_STATUS_NULL_POINTER = 1,
  ACLL_STATUS_INVALID_ARGUMENT = 2,
  ACLL_STATUS_INVALID_SPEC = 3,
  ACLL_STATUS_SHAPE = 4,
  ACLL_STATUS_INVALID_TASK = 5,
  ACLL_STATUS_EVALUATION = 6,
  ACLL_STATUS_CONDITIONING = 7,
  ACLL_STATUS_IO = 8,
  ACLL_STATUS_FORMAT = 9,
  ACLL_STATUS_CONFIG = 10,
  ACLL_STATUS_RUNTIME = 11,
  ACLL_STATUS_PANIC = 12,
} AcllStatus;

/**
 * Opaque evaluation cache handle.
 */
typedef struct AcllEvalCache AcllEvalCache;

/**
 * Opaque network handle.
 */
typedef struct AcllNetwork AcllNetwork;

/**
 * Search settings; obtain defaults from [`acll_dual_config_default`].
 */
typedef struct AcllDualConfig {
  double epsilon;
  double lambda_lo;
  double lambda_hi;
  double lambda_tol;
  uint32_t max_rounds;
  uint32_t n_init;
  uint32_t n_iter;
  uint64_t bo_seed;
  double ei_tolerance;
  /**
   * 0 selects the default cap of `8 * (n_init + n_iter)`.
   */
  uint32_t max_evaluations;
} AcllDualConfig;

/**
 * Measures `(size, risk)` at `theta[0..dim]`; returns 0 on success.
 */
typedef int (*AcllEvaluateFn)(void *user,
                              const double *theta,
                              size_t dim,
                              double *out_size,
                              double *out_risk);

/**
 * Outcome of [`acll_select`] besides the chosen theta.
 */
typedef struct AcllSelectionInfo {
  double size;
  double risk;
  double lambda_final;
  /**
   * 1 when no evaluated point met the constraint (theta is then all zeros).
   */
  int infeasible;
  int converged;
  size_t rounds;
  size_t evaluations;
} AcllSelectionInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *acll_last_error_message(void);

/**
 * Creates a network with `layer_dims = [input, hidden.., classes]`.
 *
 * # Safety
 * `dims` must point to `n_dims` readable values; `out` must be writable.
 */
enum AcllStatus acll_network_new(const size_t *dims,
                                 size_t n_dims,
                                 uint64_t seed,
                                 struct AcllNetwork **out);

/**
 * # Safety
 * `net` must come from this library and not be used afterwards. NULL is a no-op.
 */
void acll_network_free(struct AcllNetwork *net);

/**
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum AcllStatus acll_network_weight_count(const struct AcllNetwork *net, size_t *out);

/**
 * Registers an extra output head for `task`.
 *
 * # Safety
 * `net` must be a live handle.
 */
enum AcllStatus acll_network_register_head(struct AcllNetwork *net,
                                           uint32_t task,
                                           size_t class_count);

/**
 * Writes the bit-exact binary form.
 *
 * # Safety
 * `net` must be a live handle; `path` a NUL-terminated string.
 */
enum AcllStatus acll_network_save(const struct AcllNetwork *net, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AcllStatus acll_network_load(const char *path, struct AcllNetwork **out);

/**
 * Predicts labels for `rows` row-major inputs of width `cols` with every
 * weight active.
 *
 * # Safety
 * `inputs` must hold `rows * cols` values and `out_labels` room for `rows`.
 */
enum AcllStatus acll_network_predict(const struct AcllNetwork *net,
                                     uint32_t task,
                                     const double *inputs,
                                     size_t rows,
                                     size_t cols,
                                     size_t *out_labels);

/**
 * # Safety
 * `out` must be writable.
 */
enum AcllStatus acll_eval_cache_new(struct AcllEvalCache **out);

/**
 * # Safety
 * `cache` must come from this library and not be used afterwards. NULL is a no-op.
 */
void acll_eval_cache_free(struct AcllEvalCache *cache);

/**
 * # Safety
 * `cache` must be a live handle; `out` must be writable.
 */
enum AcllStatus acll_eval_cache_len(const struct AcllEvalCache *cache, size_t *out);

/**
 * Writes one JSON object per entry, in evaluation order.
 *
 * # Safety
 * `cache` must be a live handle; `path` a NUL-terminated string.
 */
enum AcllStatus acll_eval_cache_write_jsonl(const struct AcllEvalCache *cache, const char *path);

struct AcllDualConfig acll_dual_config_default(void);

/**
 * Chooses the most compressed theta whose risk stays within
 * `reference_risk + epsilon`. `cache` may be NULL; when given, it is reused
 * and extended. `out_theta` receives `dim` values.
 *
 * # Safety
 * Pointers must be valid for the documented sizes; `evaluate` is called
 * with `user` on the calling thread only.
 */
enum AcllStatus acll_select(const struct AcllDualConfig *cfg,
                            double reference_risk,
                            size_t dim,
                            AcllEvaluateFn evaluate,
                            void *user,
                            struct AcllEvalCache *cache,
                            double *out_theta,
                            struct AcllSelectionInfo *out_info);

/**
 * Checks a config file. Returns `Ok` with `*out_count = 0` when valid, or
 * `Config` with the diagnostics (one per line) as the last error message.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_count` may be NULL.
 */
enum AcllStatus acll_validate_config(const char *path, size_t *out_count);

/**
 * Runs a config file. `out_dir` (nullable) overrides the output directory;
 * `seed` is used instead of the configured seed when `override_seed` is 1.
 *
 * # Safety
 * `path` and a non-NULL `out_dir` must be NUL-terminated strings.
 */
enum AcllStatus acll_run_experiment(const char *path,
                                    const char *out_dir,
                                    int override_seed,
                                    uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACLL_H */
