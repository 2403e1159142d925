#ifndef ADVDEPTH_H
#define ADVDEPTH_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdvdepthArchitecture {
  ADVDEPTH_ARCHITECTURE_MODEL_A = 0,
  ADVDEPTH_ARCHITECTURE_MODEL_B = 1,
} AdvdepthArchitecture;

typedef enum AdvdepthStatus {
  ADVDEPTH_STATUS_OK = 0,
  ADVDEPTH_STATUS_SHAPE_ERROR = 2,
  ADVDEPTH_STATUS_NUMERICS_ERROR = 3,
  ADVDEPTH_STATUS_CONFIG_ERROR = 4,
  ADVDEPTH_STATUS_DATA_ERROR = 5,
  ADVDEPTH_STATUS_FORMAT_ERROR = 6,
  ADVDEPTH_STATUS_IO_ERROR = 7,
  ADVDEPTH_STATUS_NULL_POINTER = 8,
  ADVDEPTH_STATUS_INVALID_UTF8 = 9,
  ADVDEPTH_STATUS_PANIC = 10,
} AdvdepthStatus;

/**
 * Opaque trained or freshly initialised depth model.
 */
typedef struct AdvdepthModel AdvdepthModel;

/**
 * Opaque synthetic scene.
 */
typedef struct AdvdepthScene AdvdepthScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *advdepth_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *advdepth_version(void);

/**
 * Seeded untrained model with the default 1 to 80 m range. `arch` is an
 * [`AdvdepthArchitecture`] value; anything else is a config error.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum AdvdepthStatus advdepth_model_new(uint32_t arch, uint64_t seed, struct AdvdepthModel **out);

/**
 * Loads a model directory written by `advdepth train`.
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out` writable.
 */
enum AdvdepthStatus advdepth_model_load(const char *dir, struct AdvdepthModel **out);

/**
 * Writes the model to `dir`.
 *
 * # Safety
 * `model` must be a live handle and `dir` a nul-terminated string.
 */
enum AdvdepthStatus advdepth_model_save(const struct AdvdepthModel *model, const char *dir);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void advdepth_model_free(struct AdvdepthModel *model);

/**
 * Predicts depth for one image. `depth_out` receives `height * width`
 * values.
 *
 * # Safety
 * `image` must hold `3 * height * width` floats and `depth_out`
 * `height * width`.
 */
enum AdvdepthStatus advdepth_model_predict(const struct AdvdepthModel *model,
                                           const float *image,
                                           size_t height,
                                           size_t width,
                                           float *depth_out);

/**
 * Crafts a perturbation driving the prediction toward `(1 + alpha)` times
 * the clean prediction. A negative `eta` picks the default step size for
 * `xi`. `v_out` receives `3 * height * width` values.
 *
 * # Safety
 * Buffers must have the sizes above; `final_loss` may be null.
 */
enum AdvdepthStatus advdepth_craft_scale(const struct AdvdepthModel *model,
                                         const float *image,
                                         size_t height,
                                         size_t width,
                                         double alpha,
                                         double xi,
                                         double eta,
                                         size_t steps,
                                         float *v_out,
                                         double *final_loss);

/**
 * `mean(|pred - target| / target)` over `len` values.
 *
 * # Safety
 * `pred` and `target` must hold `len` floats; `out` must be writable.
 */
enum AdvdepthStatus advdepth_are(const float *pred, const float *target, size_t len, double *out);

/**
 * Generates the scene for `seed` at `height` x `width` with default
 * parameters otherwise.
 *
 * # Safety
 * `out` must be writable.
 */
enum AdvdepthStatus advdepth_scene_generate(uint64_t seed,
                                            size_t height,
                                            size_t width,
                                            struct AdvdepthScene **out);

/**
 * Copies the scene image (`3 * H * W` floats) and ground-truth depth
 * (`H * W` floats); either destination may be null. `len_image` and
 * `len_depth` give the buffer capacities.
 *
 * # Safety
 * Non-null buffers must hold the stated number of floats.
 */
enum AdvdepthStatus advdepth_scene_copy(const struct AdvdepthScene *scene,
                                        float *image_out,
                                        size_t len_image,
                                        float *depth_out,
                                        size_t len_depth);

/**
 * Releases a scene handle; null is ignored.
 *
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void advdepth_scene_free(struct AdvdepthScene *scene);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVDEPTH_H */
