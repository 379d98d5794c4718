#ifndef SAC_H
#define SAC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SacKernel {
  SAC_KERNEL_COSINE = 0,
  SAC_KERNEL_RBF = 1,
} SacKernel;

typedef enum SacOutputKind {
  SAC_OUTPUT_KIND_PROBABILITY = 0,
  SAC_OUTPUT_KIND_LOGIT = 1,
} SacOutputKind;

typedef enum SacStatus {
  SAC_STATUS_OK = 0,
  SAC_STATUS_NULL_ARGUMENT = 1,
  SAC_STATUS_INVALID_ARGUMENT = 2,
  SAC_STATUS_IO = 3,
  SAC_STATUS_PARSE = 4,
  SAC_STATUS_INTEGRITY = 5,
  SAC_STATUS_INVALID_IMAGE = 6,
  SAC_STATUS_PROBE_SET_MISMATCH = 7,
  SAC_STATUS_SHAPE_MISMATCH = 8,
  SAC_STATUS_KERNEL_MISMATCH = 9,
  SAC_STATUS_INVALID_OUTPUTS = 10,
  SAC_STATUS_EMPTY_POOL = 11,
  SAC_STATUS_INVALID_CONFIG = 12,
  SAC_STATUS_NUMERIC = 13,
  SAC_STATUS_OTHER = 14,
  SAC_STATUS_PANIC = 15,
} SacStatus;

/**
 * A correlation-matrix fingerprint.
 */
typedef struct SacFingerprint SacFingerprint;

/**
 * A trained classifier.
 */
typedef struct SacModel SacModel;

/**
 * A model's outputs on a probe set.
 */
typedef struct SacOutputs SacOutputs;

/**
 * An ordered probe set.
 */
typedef struct SacProbeSet SacProbeSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * call into this library on the same thread.
 */
const char *sac_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sac_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SacStatus sac_model_load(const char *path, struct SacModel **out);

/**
 * # Safety
 * `model` must come from `sac_model_load` (or be null) and not be used afterwards.
 */
void sac_model_free(struct SacModel *model);

/**
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SacStatus sac_probe_set_load(const char *dir, struct SacProbeSet **out);

/**
 * Number of probes, or 0 for a null handle.
 *
 * # Safety
 * `probes` must be a live handle or null.
 */
size_t sac_probe_set_len(const struct SacProbeSet *probes);

/**
 * # Safety
 * `probes` must come from `sac_probe_set_load` (or be null) and not be used afterwards.
 */
void sac_probe_set_free(struct SacProbeSet *probes);

/**
 * Query `model` on every probe.
 *
 * # Safety
 * Handles must be live; `out` must be a valid pointer.
 */
enum SacStatus sac_model_outputs(const struct SacModel *model,
                                 const struct SacProbeSet *probes,
                                 enum SacOutputKind kind,
                                 struct SacOutputs **out);

/**
 * Wrap outputs obtained elsewhere (for example from a remote suspect).
 * `values` holds `rows * cols` numbers in row-major order, one row per
 * probe in probe order; `rows` must equal the probe count.
 *
 * # Safety
 * `values` must point to `rows * cols` readable doubles.
 */
enum SacStatus sac_outputs_new(const struct SacProbeSet *probes,
                               const double *values,
                               size_t rows,
                               size_t cols,
                               enum SacOutputKind kind,
                               struct SacOutputs **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SacStatus sac_outputs_load(const char *path, struct SacOutputs **out);

/**
 * # Safety
 * `outputs` must be live; `path` a NUL-terminated string.
 */
enum SacStatus sac_outputs_save(const struct SacOutputs *outputs, const char *path);

/**
 * # Safety
 * `outputs` must be live or null; `rows` and `cols` valid pointers.
 */
enum SacStatus sac_outputs_shape(const struct SacOutputs *outputs, size_t *rows, size_t *cols);

/**
 * # Safety
 * `outputs` must come from this library (or be null) and not be used afterwards.
 */
void sac_outputs_free(struct SacOutputs *outputs);

/**
 * Correlation fingerprint of `outputs`. For the RBF kernel a `bandwidth`
 * of zero or less selects the median pairwise distance; it is ignored for
 * the cosine kernel.
 *
 * # Safety
 * `outputs` must be live; `out` a valid pointer.
 */
enum SacStatus sac_fingerprint_new(const struct SacOutputs *outputs,
                                   enum SacKernel kernel,
                                   double bandwidth,
                                   struct SacFingerprint **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SacStatus sac_fingerprint_load(const char *path, struct SacFingerprint **out);

/**
 * # Safety
 * `fp` must be live; `path` a NUL-terminated string.
 */
enum SacStatus sac_fingerprint_save(const struct SacFingerprint *fp, const char *path);

/**
 * # Safety
 * `fp` must come from this library (or be null) and not be used afterwards.
 */
void sac_fingerprint_free(struct SacFingerprint *fp);

/**
 * Mean absolute difference between two fingerprints on the same probes.
 *
 * # Safety
 * Handles must be live; `distance` a valid pointer.
 */
enum SacStatus sac_fingerprint_distance(const struct SacFingerprint *source,
                                        const struct SacFingerprint *suspect,
                                        double *distance);

/**
 * Smallest of `len` irrelevant-model distances.
 *
 * # Safety
 * `distances` must point to `len` readable doubles; `threshold` a valid pointer.
 */
enum SacStatus sac_threshold_worst_irrelevant(const double *distances,
                                              size_t len,
                                              double *threshold);

/**
 * 1 when `distance <= threshold` (stolen), else 0.
 */
int32_t sac_is_stolen(double distance, double threshold);

/**
 * Run a JSON audit config and write the report. `exit_code_out` receives 2 if
 * any suspect is stolen, else 0.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `exit_code_out` a valid pointer.
 */
enum SacStatus sac_audit_run(const char *config_path,
                             const char *report_path,
                             int32_t *exit_code_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAC_H */
