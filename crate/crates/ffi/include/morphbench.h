#ifndef MORPHBENCH_H
#define MORPHBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum MbStatus {
  MB_STATUS_OK = 0,
  MB_STATUS_NULL_POINTER = 1,
  MB_STATUS_INVALID_ARGUMENT = 2,
  MB_STATUS_CONFIG = 3,
  MB_STATUS_MISSING_INPUT = 4,
  MB_STATUS_DIMENSIONS = 5,
  MB_STATUS_NUMERIC = 6,
  MB_STATUS_IO = 7,
  MB_STATUS_PANIC = 8,
} MbStatus;

/**
 * Biometric embedder handle.
 */
typedef struct MbBiometric MbBiometric;

/**
 * Generator handle.
 */
typedef struct MbGenerator MbGenerator;

/**
 * ROC curve handle.
 */
typedef struct MbRoc MbRoc;

typedef struct MbRates {
  double far;
  double frr;
  double mmpmr;
  double rmmr;
} MbRates;

/**
 * One ROC point. `has_far` is 0 when no imposter scores were given, and
 * `far` is then NaN.
 */
typedef struct MbRocPoint {
  double threshold;
  double frr;
  double mmpmr;
  double far;
  int32_t has_far;
} MbRocPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *mb_last_error(void);

/**
 * Static name of a status code.
 */
const char *mb_status_name(enum MbStatus status);

/**
 * Create a generator with the default 32x32 configuration.
 *
 * # Safety
 * `out_gen` must be a valid pointer to writable storage for one handle pointer.
 */
enum MbStatus mb_generator_init(uint64_t seed, struct MbGenerator **out_gen);

/**
 * Load a generator saved by the command-line tool.
 *
 * # Safety
 * `dir` must be a nul-terminated string; `out_gen` as for `mb_generator_init`.
 */
enum MbStatus mb_generator_load(const char *dir, struct MbGenerator **out_gen);

/**
 * # Safety
 * `gen` must come from `mb_generator_init`/`mb_generator_load` or be null.
 */
void mb_generator_free(struct MbGenerator *gen);

/**
 * Latent layout and image size of a generator.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MbStatus mb_generator_dims(const struct MbGenerator *gen,
                                size_t *layers,
                                size_t *style_dim,
                                size_t *resolution);

/**
 * Render a `[layers, style_dim]` latent stack (row-major) into an
 * `[R, R, 3]` image with values in [0, 1].
 *
 * # Safety
 * `w` must point to `w_len` floats and `image` to `image_len` writable floats.
 */
enum MbStatus mb_synthesize(const struct MbGenerator *gen,
                            const float *w,
                            size_t w_len,
                            float *image,
                            size_t image_len);

/**
 * MS-SSIM of two `[height, width, channels]` images (default window 11,
 * sigma 1.5, dynamic range 1).
 *
 * # Safety
 * `a` and `b` must each point to `height * width * channels` floats.
 */
enum MbStatus mb_ms_ssim(const float *a,
                         const float *b,
                         size_t height,
                         size_t width,
                         size_t channels,
                         double *result);

/**
 * Create an untrained biometric embedder with the default configuration.
 *
 * # Safety
 * `out_bio` must be valid.
 */
enum MbStatus mb_biometric_init(uint64_t seed, struct MbBiometric **out_bio);

/**
 * Load an embedder saved by the command-line tool.
 *
 * # Safety
 * `dir` must be a nul-terminated string; `out_bio` must be valid.
 */
enum MbStatus mb_biometric_load(const char *dir, struct MbBiometric **out_bio);

/**
 * # Safety
 * `bio` must come from `mb_biometric_init`/`mb_biometric_load` or be null.
 */
void mb_biometric_free(struct MbBiometric *bio);

/**
 * Unit-norm embedding of an `[R, R, 3]` image.
 *
 * # Safety
 * `image` must point to `image_len` floats, `embedding` to `embedding_len`
 * writable floats.
 */
enum MbStatus mb_biometric_embed(const struct MbBiometric *bio,
                                 const float *image,
                                 size_t image_len,
                                 float *embedding,
                                 size_t embedding_len);

/**
 * Cosine match score of two unit embeddings, clamped to [-1, 1].
 *
 * # Safety
 * `u` and `v` must each point to `len` floats.
 */
enum MbStatus mb_match_score(const float *u, const float *v, size_t len, double *score);

/**
 * Smallest observed imposter score `t` with FAR(t) <= target (scores at or
 * above `t` are accepted).
 *
 * # Safety
 * `imposter` must point to `n` doubles.
 */
enum MbStatus mb_threshold_at_far(const double *imposter,
                                  size_t n,
                                  double target_far,
                                  double *threshold);

/**
 * Largest observed genuine score `t` with FRR(t) <= target.
 *
 * # Safety
 * `genuine` must point to `n` doubles.
 */
enum MbStatus mb_threshold_at_frr(const double *genuine,
                                  size_t n,
                                  double target_frr,
                                  double *threshold);

/**
 * FAR, FRR, MMPMR and RMMR at threshold `t`. All three lists must be
 * non-empty.
 *
 * # Safety
 * Each list pointer must point to its stated number of doubles.
 */
enum MbStatus mb_rates_at(const double *genuine,
                          size_t n_genuine,
                          const double *imposter,
                          size_t n_imposter,
                          const double *mmmss,
                          size_t n_mmmss,
                          double t,
                          struct MbRates *rates);

/**
 * MMPMR-vs-FRR curve. `imposter` may be empty, in which case every point
 * has `has_far = 0`.
 *
 * # Safety
 * List pointers as for `mb_rates_at`; `out_roc` must be valid.
 */
enum MbStatus mb_roc(const double *genuine,
                     size_t n_genuine,
                     const double *imposter,
                     size_t n_imposter,
                     const double *mmmss,
                     size_t n_mmmss,
                     struct MbRoc **out_roc);

/**
 * Number of points on a curve; 0 for a null handle.
 *
 * # Safety
 * `roc` must be a live handle or null.
 */
size_t mb_roc_len(const struct MbRoc *roc);

/**
 * # Safety
 * `roc` must be a live handle and `point` valid.
 */
enum MbStatus mb_roc_point(const struct MbRoc *roc, size_t index, struct MbRocPoint *point);

/**
 * # Safety
 * `roc` must come from `mb_roc` or be null.
 */
void mb_roc_free(struct MbRoc *roc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MORPHBENCH_H */
