#ifndef FLOWREG_H
#define FLOWREG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FlowregDirection {
  FLOWREG_DIRECTION_A2B = 0,
  FLOWREG_DIRECTION_B2A = 1,
} FlowregDirection;

typedef enum FlowregStatus {
  FLOWREG_STATUS_OK = 0,
  FLOWREG_STATUS_NULL_POINTER = 1,
  FLOWREG_STATUS_INVALID_ARGUMENT = 2,
  FLOWREG_STATUS_IO = 3,
  FLOWREG_STATUS_CHECKPOINT = 4,
  FLOWREG_STATUS_CONFIG = 5,
  FLOWREG_STATUS_SHAPE = 6,
  FLOWREG_STATUS_PANIC = 7,
} FlowregStatus;

/**
 * Trained generators loaded from a checkpoint. Opaque to C.
 */
typedef struct FlowregTranslator FlowregTranslator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next flowreg call on the same thread.
 */
const char *flowreg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *flowreg_version(void);

/**
 * Loads a checkpoint (and the configuration stored next to it).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FlowregStatus flowreg_translator_open(const char *path, struct FlowregTranslator **out);

/**
 * Image side length the checkpoint was trained at.
 *
 * # Safety
 * `t` must come from [`flowreg_translator_open`]; `out` must be writable.
 */
enum FlowregStatus flowreg_translator_image_size(const struct FlowregTranslator *t, size_t *out);

/**
 * Translates `batch` single-channel images. `height` and `width` must be even.
 *
 * # Safety
 * `input` and `output` must each hold `batch * height * width` floats.
 */
enum FlowregStatus flowreg_translator_translate(const struct FlowregTranslator *t,
                                                enum FlowregDirection direction,
                                                const float *input,
                                                size_t batch,
                                                size_t height,
                                                size_t width,
                                                float *output);

/**
 * Releases a translator. Null is ignored.
 *
 * # Safety
 * `t` must come from [`flowreg_translator_open`] and not be used afterwards.
 */
void flowreg_translator_free(struct FlowregTranslator *t);

/**
 * Mean squared error of two `height x width` images.
 *
 * # Safety
 * `a` and `b` must hold `height * width` floats; `out` must be writable.
 */
enum FlowregStatus flowreg_mse(const float *a,
                               const float *b,
                               size_t height,
                               size_t width,
                               double *out);

/**
 * `10 log10(peak^2 / mse)`, capped for `mse == 0`.
 *
 * # Safety
 * `out` must be writable.
 */
enum FlowregStatus flowreg_psnr(double mse, double peak, double *out);

/**
 * Gaussian-window SSIM (11 taps, sigma 1.5). Images must be at least 11x11.
 *
 * # Safety
 * `a` and `b` must hold `height * width` floats; `out` must be writable.
 */
enum FlowregStatus flowreg_ssim(const float *a,
                                const float *b,
                                size_t height,
                                size_t width,
                                double peak,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWREG_H */
