#ifndef STSSL_H
#define STSSL_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * A loaded model snapshot (one network's EMA weights plus its config).
 */
typedef struct StsslModel StsslModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *stssl_last_error_message(void);

/**
 * Generate the synthetic dataset described by a config file or preset into
 * `out_dir` (NULL uses the config's dataset directory).
 *
 * # Safety
 * `config_path`/`preset_name` must be NULL or valid NUL-terminated strings;
 * at least one must be non-NULL. Same for `out_dir` when given.
 */
int stssl_generate_data(const char *config_path, const char *preset_name, const char *out_dir);

/**
 * Run training to completion, writing checkpoints and logs under `out_dir`.
 *
 * # Safety
 * String arguments as in [`stssl_generate_data`]; `out_dir` must be valid.
 */
int stssl_train(const char *config_path, const char *preset_name, const char *out_dir);

/**
 * Load one role ("teacher" or "student") from a checkpoint as an inference
 * model. The experiment config (file or preset) must match the checkpoint.
 * Returns NULL on failure; see [`stssl_last_error_message`].
 *
 * # Safety
 * String arguments must be NULL or valid NUL-terminated strings;
 * `checkpoint` and `role` are required.
 */
struct StsslModel *stssl_model_load(const char *config_path,
                                    const char *preset_name,
                                    const char *checkpoint,
                                    const char *role);

/**
 * # Safety
 * `model` must be a pointer from [`stssl_model_load`], not yet freed.
 */
void stssl_model_free(struct StsslModel *model);

/**
 * Number of classes the model scores, or -1 on NULL.
 *
 * # Safety
 * `model` must be NULL or a live pointer from [`stssl_model_load`].
 */
int stssl_model_num_classes(const struct StsslModel *model);

/**
 * Expected square image side length in pixels, or -1 on NULL.
 *
 * # Safety
 * `model` must be NULL or a live pointer from [`stssl_model_load`].
 */
int stssl_model_image_size(const struct StsslModel *model);

/**
 * Score one image. `pixels` is row-major H×W×3 in [0, 1] with H = W =
 * `stssl_model_image_size`. Metadata is read by teacher models and ignored
 * by students; pass `day_of_year < 0` for "no acquisition time". Writes
 * `num_classes` probabilities into `out_probs`.
 *
 * # Safety
 * `model` must be live; `pixels` must point to `size*size*3` doubles;
 * `out_probs` must have room for `num_classes` doubles.
 */
int stssl_model_predict(const struct StsslModel *model,
                        const double *pixels,
                        double latitude,
                        double longitude,
                        double day_of_year,
                        double *out_probs);

/**
 * Library version as a static string.
 */
const char *stssl_version(void);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* STSSL_H */
