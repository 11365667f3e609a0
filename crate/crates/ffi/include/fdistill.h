#ifndef FDISTILL_H
#define FDISTILL_H

/* Generated by cbindgen from the fdistill-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of an FFI call.
typedef enum FdStatus {
  // The call succeeded.
  FD_OK = 0,
  // A required pointer argument was null.
  FD_NULL_POINTER = 1,
  // An argument failed validation.
  FD_INVALID_ARGUMENT = 2,
  // Buffer dimensions are inconsistent or unsupported.
  FD_SHAPE_MISMATCH = 3,
  // An unexpected internal failure; details via fd_last_error.
  FD_INTERNAL = 4,
} FdStatus;

// Scalar fields of a distillation config addressable through the ABI.
typedef enum FdDistillParam {
  FD_LAMBDA_AT = 0,
  FD_POWER = 1,
  FD_TAU = 2,
  FD_LAMBDA_D = 3,
  FD_LAMBDA_LD = 4,
  FD_EPS = 5,
} FdDistillParam;

// Opaque distillation loss configuration.
typedef struct FdDistillConfig FdDistillConfig;

// Opaque forward-diffusion schedule (beta and cumulative-alpha tables).
typedef struct FdNoiseSchedule FdNoiseSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message raised on the calling thread.
//
// The pointer stays valid until the next failing call on the same thread.
// Never null; initially the empty string.
//
// # Safety
// The returned pointer must not be freed or written through.
const char *fd_last_error(void);

// Crate version as a static nul-terminated string.
//
// # Safety
// The returned pointer is static; it must not be freed.
const char *fd_version(void);

// Builds a linear noise schedule handle.
//
// # Safety
// `out` must be a valid pointer. On success it receives an owned handle
// that must be released with [`fd_noise_schedule_free`].
enum FdStatus fd_noise_schedule_new(size_t t_total,
                                    double beta_min,
                                    double beta_max,
                                    struct FdNoiseSchedule **out);

// Number of diffusion steps in the schedule.
//
// # Safety
// `schedule` must be a live handle from [`fd_noise_schedule_new`]; `out`
// must be valid for writes.
enum FdStatus fd_noise_schedule_len(const struct FdNoiseSchedule *schedule, size_t *out);

// Reads `beta[t]` (one-based step index, as in the sampling loop's `t`).
//
// # Safety
// `schedule` must be a live handle; `out` must be valid for writes.
enum FdStatus fd_noise_schedule_beta(const struct FdNoiseSchedule *schedule, size_t t, double *out);

// Reads the cumulative product `alpha_bar[t]` (one-based step index).
//
// # Safety
// `schedule` must be a live handle; `out` must be valid for writes.
enum FdStatus fd_noise_schedule_alpha_bar(const struct FdNoiseSchedule *schedule,
                                          size_t t,
                                          double *out);

// Releases a schedule handle. Null is a no-op.
//
// # Safety
// `schedule` must be null or an owned handle not freed before.
void fd_noise_schedule_free(struct FdNoiseSchedule *schedule);

// Builds a config handle with the shipped defaults.
//
// # Safety
// `out` must be a valid pointer. On success it receives an owned handle
// that must be released with [`fd_distill_config_free`].
enum FdStatus fd_distill_config_new(struct FdDistillConfig **out);

// Reads one scalar field. The attention power is returned as a whole f64.
//
// # Safety
// `config` must be a live handle; `out` must be valid for writes.
enum FdStatus fd_distill_config_get(const struct FdDistillConfig *config,
                                    enum FdDistillParam param,
                                    double *out);

// Writes one scalar field, validating the resulting config. The attention
// power must be a whole number at least 1.
//
// # Safety
// `config` must be a live handle.
enum FdStatus fd_distill_config_set(struct FdDistillConfig *config,
                                    enum FdDistillParam param,
                                    double value);

// Releases a config handle. Null is a no-op.
//
// # Safety
// `config` must be null or an owned handle not freed before.
void fd_distill_config_free(struct FdDistillConfig *config);

// Whitens a [b,c,h,w] feature buffer: per spatial location, channels are
// shifted and scaled to zero mean and unit variance. `out` receives b*c*h*w
// values in the same layout.
//
// # Safety
// `features` must be valid for b*c*h*w reads and `out` for as many writes.
enum FdStatus fd_whiten(const double *features,
                        size_t b,
                        size_t c,
                        size_t h,
                        size_t w,
                        double eps,
                        double *out);

// Channel-collapsed attention map of a [b,c,h,w] feature buffer:
// `out[b,h,w] = sum_c |f[b,c,h,w]|^p`. `out` receives b*h*w values.
//
// # Safety
// `features` must be valid for b*c*h*w reads and `out` for b*h*w writes.
enum FdStatus fd_attention_map(const double *features,
                               size_t b,
                               size_t c,
                               size_t h,
                               size_t w,
                               uint32_t p,
                               double *out);

// Whitened feature regression loss between same-shape [b,c,h,w] student
// and teacher buffers, treated as one pyramid level.
//
// # Safety
// Both buffers must be valid for b*c*h*w reads; `config` must be a live
// handle; `out` must be valid for one write.
enum FdStatus fd_feature_mse_loss(const double *student,
                                  const double *teacher,
                                  size_t b,
                                  size_t c,
                                  size_t h,
                                  size_t w,
                                  const struct FdDistillConfig *config,
                                  double *out);

// Attention transfer loss between same-shape [b,c,h,w] student and teacher
// buffers, treated as one pyramid level.
//
// # Safety
// Both buffers must be valid for b*c*h*w reads; `config` must be a live
// handle; `out` must be valid for one write.
enum FdStatus fd_attention_loss(const double *student,
                                const double *teacher,
                                size_t b,
                                size_t c,
                                size_t h,
                                size_t w,
                                const struct FdDistillConfig *config,
                                double *out);

// Soft-label distillation loss between teacher logits and student logits,
// both [b,k,h,w], at the config's temperature.
//
// # Safety
// Both buffers must be valid for b*k*h*w reads; `config` must be a live
// handle; `out` must be valid for one write.
enum FdStatus fd_label_distill_loss(const double *teacher_logits,
                                    const double *student_logits,
                                    size_t b,
                                    size_t k,
                                    size_t h,
                                    size_t w,
                                    const struct FdDistillConfig *config,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FDISTILL_H */
