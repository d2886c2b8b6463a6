#ifndef SWITCHING_H
#define SWITCHING_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum SwStatus {
  SW_STATUS_OK = 0,
  SW_STATUS_NULL_POINTER = 1,
  SW_STATUS_INVALID_ARGUMENT = 2,
  SW_STATUS_SHAPE_MISMATCH = 3,
  SW_STATUS_IO = 4,
  SW_STATUS_FORMAT = 5,
  SW_STATUS_INVALID_MODEL = 6,
  SW_STATUS_NUMERIC = 7,
  SW_STATUS_BUFFER_TOO_SMALL = 8,
  SW_STATUS_WRONG_MODEL_KIND = 9,
  SW_STATUS_PANIC = 10,
} SwStatus;

// Opaque model handle; an MSM or an SDS.
typedef struct SwModel SwModel;

// Model dimensions. `obs_dim` is 0 for an MSM.
typedef struct SwDims {
  size_t num_regimes;
  size_t num_initial;
  size_t lag;
  size_t latent_dim;
  size_t obs_dim;
  bool is_sds;
} SwDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *sw_last_error(void);

// Library version as a static NUL-terminated string.
const char *sw_version(void);

// Loads a JSON checkpoint file and validates it.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SwStatus sw_model_load(const char *path, struct SwModel **out);

// Parses checkpoint JSON text and validates it.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a writable pointer.
enum SwStatus sw_model_from_json(const char *json, struct SwModel **out);

// Serialises the model as checkpoint JSON. Free the string with [`sw_string_free`].
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum SwStatus sw_model_to_json(const struct SwModel *model, char **out);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void sw_model_free(struct SwModel *model);

// # Safety
// `s` must be null or a string returned by this library not yet freed.
void sw_string_free(char *s);

// # Safety
// `model` must come from this library; `out` must be writable.
enum SwStatus sw_model_dims(const struct SwModel *model, struct SwDims *out);

// Exact log-likelihood of one latent trajectory (`len x dim`) under the
// model's MSM prior.
//
// # Safety
// `data` must hold `len * dim` doubles; `out` must be writable.
enum SwStatus sw_msm_log_likelihood(const struct SwModel *model,
                                    const double *data,
                                    size_t len,
                                    size_t dim,
                                    double *out);

// Regime posteriors of one latent trajectory. Row `s` of `gamma` is time
// `lag + s`; every row is padded to `num_regimes` columns, so the buffer needs
// `(len - lag + 1) * num_regimes` doubles. Row 0 has `num_initial` valid
// entries, the rest zero.
//
// # Safety
// `data` must hold `len * dim` doubles and `gamma` `capacity` doubles.
enum SwStatus sw_msm_posterior(const struct SwModel *model,
                               const double *data,
                               size_t len,
                               size_t dim,
                               double *gamma,
                               size_t capacity);

// Encoder means for one observation trajectory (`len x obs_dim`); writes
// `len * latent_dim` doubles.
//
// # Safety
// `data` must hold `len * dim` doubles and `out` `capacity` doubles.
enum SwStatus sw_sds_encode(const struct SwModel *model,
                            const double *data,
                            size_t len,
                            size_t dim,
                            double *out,
                            size_t capacity);

// Samples benchmark `setting` (`"A"`..`"F"`) into directory `out_dir`.
//
// # Safety
// `setting` and `out_dir` must be NUL-terminated strings.
enum SwStatus sw_generate(const char *setting,
                          uint64_t seed,
                          size_t num_train,
                          size_t num_eval,
                          const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SWITCHING_H */
