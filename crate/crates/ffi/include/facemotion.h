#ifndef FACEMOTION_H
#define FACEMOTION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FmStatus {
  FM_STATUS_OK = 0,
  FM_STATUS_NULL_POINTER = 1,
  FM_STATUS_INVALID_ARGUMENT = 2,
  FM_STATUS_IO = 3,
  FM_STATUS_CONFIG = 4,
  FM_STATUS_MISSING_STAGE = 5,
  FM_STATUS_CORRUPT_CHECKPOINT = 6,
  FM_STATUS_EMPTY_PROMPT = 7,
  FM_STATUS_TOO_LONG = 8,
  FM_STATUS_BUFFER_TOO_SMALL = 9,
  FM_STATUS_PANIC = 10,
  FM_STATUS_INTERNAL = 11,
} FmStatus;

/**
 * Opaque handle over loaded checkpoints.
 */
typedef struct FmEngine FmEngine;

/**
 * Opaque face model handle.
 */
typedef struct FmFaceModel FmFaceModel;

/**
 * Opaque generated motion: geometry tokens plus decoded frames.
 */
typedef struct FmMotion FmMotion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fm_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next facemotion call on the same thread.
 */
const char *fm_last_error_message(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 */
void fm_string_free(char *s);

/**
 * Builds the synthetic face model for `seed`.
 */
enum FmStatus fm_face_model_new(uint64_t seed,
                                size_t vertex_count,
                                size_t expr_dim,
                                struct FmFaceModel **out);

void fm_face_model_free(struct FmFaceModel *model);

/**
 * Vertex count V, or 0 for NULL.
 */
size_t fm_face_model_vertex_count(const struct FmFaceModel *model);

/**
 * Expression dimension E, or 0 for NULL.
 */
size_t fm_face_model_expr_dim(const struct FmFaceModel *model);

/**
 * Posed mesh for one frame, written as V×3 doubles into `vertices`.
 */
enum FmStatus fm_face_model_decode(const struct FmFaceModel *model,
                                   const double *expr,
                                   size_t expr_len,
                                   double yaw,
                                   double pitch,
                                   double roll,
                                   double *vertices,
                                   size_t capacity,
                                   size_t *written);

/**
 * Loads the VQ-VAE, Motion2Language and Language2Motion checkpoints named by
 * the run configuration at `config_path` (NULL uses the defaults).
 */
enum FmStatus fm_engine_open(const char *config_path, struct FmEngine **out);

void fm_engine_free(struct FmEngine *engine);

/**
 * Generates motion for `prompt`. `temperature` 0 is greedy; `top_k` 0
 * disables filtering.
 */
enum FmStatus fm_engine_generate(const struct FmEngine *engine,
                                 const char *prompt,
                                 uint64_t seed,
                                 double temperature,
                                 size_t top_k,
                                 struct FmMotion **out);

/**
 * Answers `question` (NULL for the default) about a token sequence. The
 * returned string must be released with [`fm_string_free`].
 */
enum FmStatus fm_engine_describe(const struct FmEngine *engine,
                                 const size_t *tokens,
                                 size_t len,
                                 const char *question,
                                 char **out);

void fm_motion_free(struct FmMotion *motion);

size_t fm_motion_frame_count(const struct FmMotion *motion);

/**
 * Values per frame: E expression coefficients then yaw, pitch, roll.
 */
size_t fm_motion_frame_width(const struct FmMotion *motion);

enum FmStatus fm_motion_tokens(const struct FmMotion *motion,
                               size_t *buf,
                               size_t capacity,
                               size_t *written);

/**
 * Row-major frames, `fm_motion_frame_width` values each.
 */
enum FmStatus fm_motion_frames(const struct FmMotion *motion,
                               double *buf,
                               size_t capacity,
                               size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACEMOTION_H */
