#ifndef EMOE_H
#define EMOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EmoeStatus {
  EMOE_STATUS_OK = 0,
  EMOE_STATUS_NULL_POINTER = 1,
  EMOE_STATUS_INVALID_UTF8 = 2,
  EMOE_STATUS_INVALID_ARGUMENT = 3,
  EMOE_STATUS_CONFIG = 4,
  EMOE_STATUS_CHECKPOINT = 5,
  EMOE_STATUS_CRC = 6,
  EMOE_STATUS_IO = 7,
  EMOE_STATUS_DEGENERATE = 8,
  EMOE_STATUS_BUFFER_TOO_SMALL = 9,
  EMOE_STATUS_INTERNAL = 10,
  EMOE_STATUS_PANIC = 11,
} EmoeStatus;

typedef enum EmoeSpace {
  EMOE_SPACE_MID_POST = 0,
  EMOE_SPACE_MID_PRE = 1,
  EMOE_SPACE_Z_NEXT = 2,
} EmoeSpace;

/**
 * Opaque handle to a loaded expert bundle.
 */
typedef struct EmoeBundle EmoeBundle;

typedef struct EmoeEstimate {
  double eu;
  double reported;
  uint32_t d_mid;
} EmoeEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Trains a bundle and writes its checkpoints.
 *
 * # Safety
 * `config_json` (JSON run configuration) and `checkpoint_dir` may be null
 * or must point to NUL-terminated strings.
 */
enum EmoeStatus emoe_train(const char *config_json, const char *checkpoint_dir);

/**
 * Loads the bundle described by `config_json` from `checkpoint_dir`.
 *
 * # Safety
 * String arguments may be null or must be NUL-terminated. `out` must be a
 * valid pointer; on success it receives a handle owned by the caller.
 */
enum EmoeStatus emoe_bundle_load(const char *config_json,
                                 const char *checkpoint_dir,
                                 struct EmoeBundle **out);

/**
 * Releases a bundle. Null is ignored.
 *
 * # Safety
 * `bundle` must come from [`emoe_bundle_load`] and not be freed twice.
 */
void emoe_bundle_free(struct EmoeBundle *bundle);

/**
 * Number of experts, or 0 for a null handle.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
uint32_t emoe_bundle_num_experts(const struct EmoeBundle *bundle);

/**
 * Number of values in one generated latent, or 0 for a null handle.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t emoe_bundle_latent_len(const struct EmoeBundle *bundle);

/**
 * Denoiser evaluations performed by this bundle so far.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
uint64_t emoe_bundle_forward_passes(const struct EmoeBundle *bundle);

/**
 * Uncertainty at the first denoising step.
 *
 * # Safety
 * `bundle` must be a live handle, `prompt` a NUL-terminated string,
 * `language_tag` null (English) or NUL-terminated, `out` valid.
 */
enum EmoeStatus emoe_estimate(const struct EmoeBundle *bundle,
                              const char *prompt,
                              const char *language_tag,
                              uint64_t seed,
                              enum EmoeSpace space,
                              struct EmoeEstimate *out);

/**
 * Uncertainty at the first step, then one aggregate rollout unless the
 * reported value reaches `threshold` (pass NaN for no threshold). On a
 * halt `*halted` is 1 and `image` is untouched; otherwise the final latent
 * is copied into `image`, which must hold `emoe_bundle_latent_len` values.
 *
 * # Safety
 * As for [`emoe_estimate`]; `image` must point to `image_len` writable
 * doubles and `halted` must be valid.
 */
enum EmoeStatus emoe_fast(const struct EmoeBundle *bundle,
                          const char *prompt,
                          const char *language_tag,
                          uint64_t seed,
                          enum EmoeSpace space,
                          double threshold,
                          struct EmoeEstimate *out,
                          double *image,
                          size_t image_len,
                          int32_t *halted);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * including the terminator, or 0 when there is no message.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t emoe_last_error(char *buf, size_t len);

/**
 * Static name of a status code.
 */
const char *emoe_status_name(enum EmoeStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMOE_H */
