/* C interface to the ulfbridge library.
 *
 * All functions return a ulfb_status. On failure the context keeps a
 * human-readable message until the next call made with it. Strings returned
 * through a context stay valid until the next call on that context. Handles
 * are not thread-safe; use one context per thread.
 */
#ifndef ULFBRIDGE_H
#define ULFBRIDGE_H

#include <stddef.h>
#include <stdint.h>

#if defined(ULFB_BUILDING_LIBRARY)
#define ULFB_API __attribute__((visibility("default")))
#else
#define ULFB_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values double as CLI exit codes. */
typedef enum ulfb_status {
  ULFB_OK = 0,
  ULFB_ERROR = 1,   /* unexpected internal failure */
  ULFB_USAGE = 2,   /* invalid arguments, configuration or unknown suite */
  ULFB_IO = 3,      /* missing, unreadable or unwritable files */
  ULFB_DATA = 4,    /* data contract violations: missing cohorts, leakage, shapes */
  ULFB_NUMERIC = 5  /* NaN during training or failed numerical routines */
} ulfb_status;

typedef struct ulfb_context ulfb_context;
typedef struct ulfb_model ulfb_model;

ULFB_API const char* ulfb_version(void);
ULFB_API const char* ulfb_status_name(ulfb_status status);

ULFB_API ulfb_status ulfb_context_create(ulfb_context** out);
ULFB_API void ulfb_context_destroy(ulfb_context* ctx);
/* Empty string when the last call succeeded. */
ULFB_API const char* ulfb_last_error(const ulfb_context* ctx);
/* Error code name of the last failure (e.g. "MissingCohort"), or "". */
ULFB_API const char* ulfb_last_error_kind(const ulfb_context* ctx);
/* "debug", "info" or "warn"; process-wide. */
ULFB_API ulfb_status ulfb_set_log_level(ulfb_context* ctx, const char* level);

/* Runs a pipeline command with JSON options and stores its JSON result,
 * readable through ulfb_result. Commands: make_data, pretrain_teacher,
 * train_encoder, train, translate, evaluate, oracle_check. An oracle_check
 * whose checks fail returns ULFB_ERROR with the result still available. */
ULFB_API ulfb_status ulfb_run(ulfb_context* ctx, const char* command, const char* options_json);
ULFB_API const char* ulfb_result(const ulfb_context* ctx);

/* Trained generator loaded from a training checkpoint. */
ULFB_API ulfb_status ulfb_model_load(ulfb_context* ctx, const char* checkpoint_path, ulfb_model** out);
ULFB_API void ulfb_model_destroy(ulfb_model* model);
ULFB_API int ulfb_model_steps(const ulfb_model* model);
/* Deterministic translation of n slices laid out [n,3,size,size] float32. */
ULFB_API ulfb_status ulfb_model_translate(ulfb_context* ctx, const ulfb_model* model, const float* input, int64_t n,
                                          int64_t size, float* output);

/* Metrics on float32 arrays in [-1, 1]. */
ULFB_API ulfb_status ulfb_psnr(ulfb_context* ctx, const float* a, const float* b, int64_t count, double max_val,
                               double* out);
/* One [height, width] image pair; configuration chosen from the image size. */
ULFB_API ulfb_status ulfb_ms_ssim(ulfb_context* ctx, const float* a, const float* b, int64_t height, int64_t width,
                                  double* out);
/* Feature matrices are row-major [n, dim] doubles. */
ULFB_API ulfb_status ulfb_fid(ulfb_context* ctx, const double* fa, int64_t na, const double* fb, int64_t nb,
                              int64_t dim, double* out);
ULFB_API ulfb_status ulfb_kid(ulfb_context* ctx, const double* fa, int64_t na, const double* fb, int64_t nb,
                              int64_t dim, double* out);

#ifdef __cplusplus
}
#endif

#endif /* ULFBRIDGE_H */
