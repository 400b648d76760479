#ifndef PAREIDOLIA_H
#define PAREIDOLIA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PpStatus {
  PP_STATUS_OK = 0,
  PP_STATUS_NULL_POINTER = 1,
  PP_STATUS_INVALID_ARGUMENT = 2,
  PP_STATUS_IO = 3,
  PP_STATUS_MALFORMED = 4,
  PP_STATUS_NUMERICAL = 5,
  // The statistic is undefined for this input (e.g. zero variance).
  PP_STATUS_UNDEFINED = 6,
  PP_STATUS_BUFFER_TOO_SMALL = 7,
  PP_STATUS_PANIC = 99,
} PpStatus;

// Loaded frozen backbone.
typedef struct PpBackbone PpBackbone;

// Trained two-class linear head.
typedef struct PpHead PpHead;

typedef struct PpStatResult {
  double t;
  double df;
  // Two-tailed p.
  double p;
  double d;
  double mean_difference;
} PpStatResult;

typedef struct PpSigmoidFit {
  // 1 when the data were flat and no sigmoid was fitted; `a` and `b` are
  // then NaN and `flat_value` holds the constant.
  int32_t flat;
  double a;
  double b;
  double rss;
  double flat_value;
} PpSigmoidFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer is
// valid until the next call into this library on the same thread.
const char *pp_last_error_message(void);

// Number of floats in one preprocessed image (3 × 224 × 224).
size_t pp_image_len(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PpStatus pp_backbone_load(const char *path, struct PpBackbone **out);

// # Safety
// `backbone` must come from [`pp_backbone_load`] and not be freed yet.
enum PpStatus pp_backbone_feature_dim(const struct PpBackbone *backbone, size_t *out);

// Copies the 32-character model hash plus a NUL into `buf`.
//
// # Safety
// `buf` must hold at least `len` bytes.
enum PpStatus pp_backbone_model_hash(const struct PpBackbone *backbone, char *buf, size_t len);

// Runs `n_images` preprocessed images (each [`pp_image_len`] floats,
// channel-major) through the backbone and writes `n_images × d` features
// row-major into `out`.
//
// # Safety
// `pixels` must hold `n_images * pp_image_len()` floats and `out`
// `n_images * d` floats.
enum PpStatus pp_backbone_extract(const struct PpBackbone *backbone,
                                  const float *pixels,
                                  size_t n_images,
                                  float *out);

// # Safety
// `backbone` must come from [`pp_backbone_load`]; NULL is ignored.
void pp_backbone_free(struct PpBackbone *backbone);

// Loads a head checkpoint written by the `train` stage.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PpStatus pp_head_load(const char *path, struct PpHead **out);

// Builds a head from `w` (d × 2, row-major: `w[2j + k]`) and `bias` (2).
//
// # Safety
// `w` must hold `2 * d` doubles, `bias` 2, and `out` must be valid.
enum PpStatus pp_head_new(size_t d, const double *w, const double *bias, struct PpHead **out);

// # Safety
// `head` must be a live handle and `out` valid.
enum PpStatus pp_head_dim(const struct PpHead *head, size_t *out);

// Softmax probabilities `[p_face, p_object]` for one feature vector.
//
// # Safety
// `features` must hold `d` floats and `out` 2 doubles.
enum PpStatus pp_head_predict_proba(const struct PpHead *head,
                                    const float *features,
                                    size_t d,
                                    double *out);

// # Safety
// `head` must come from a `pp_head_*` constructor; NULL is ignored.
void pp_head_free(struct PpHead *head);

// Pearson correlation. Returns `Undefined` when either input is constant.
//
// # Safety
// `x` and `y` must hold `n` doubles.
enum PpStatus pp_pearson_r(const double *x, const double *y, size_t n, double *out);

// Welch's unequal-variance t-test of `a` against `b`.
//
// # Safety
// `a` must hold `na` doubles, `b` `nb`, and `out` must be valid.
enum PpStatus pp_welch_t(const double *a,
                         size_t na,
                         const double *b,
                         size_t nb,
                         struct PpStatResult *out);

// Paired t-test on `a[i] - b[i]`.
//
// # Safety
// `a` and `b` must hold `n` doubles and `out` must be valid.
enum PpStatus pp_paired_t(const double *a, const double *b, size_t n, struct PpStatResult *out);

// One-sample t-test of `a` against `mu0`.
//
// # Safety
// `a` must hold `n` doubles and `out` must be valid.
enum PpStatus pp_one_sample_t(const double *a, size_t n, double mu0, struct PpStatResult *out);

// `1 / (1 + exp(-a (x - b)))`.
double pp_sigmoid(double a, double b, double x);

// Least-squares sigmoid fit to `n` points.
//
// # Safety
// `x` and `y` must hold `n` doubles and `out` must be valid.
enum PpStatus pp_fit_sigmoid(const double *x, const double *y, size_t n, struct PpSigmoidFit *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PAREIDOLIA_H */
