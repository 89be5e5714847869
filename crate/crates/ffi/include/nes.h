#ifndef NES_H
#define NES_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum NesStatus {
  NES_STATUS_OK = 0,
  NES_STATUS_NULL_POINTER = 1,
  NES_STATUS_INVALID_ARGUMENT = 2,
  NES_STATUS_PARSE = 3,
  NES_STATUS_IO = 4,
  NES_STATUS_DIMENSION_MISMATCH = 5,
  NES_STATUS_OUT_OF_RANGE = 6,
  NES_STATUS_INVALID_STATE = 7,
  NES_STATUS_NON_FINITE = 8,
  NES_STATUS_BUFFER_TOO_SMALL = 9,
  NES_STATUS_PANIC = 10,
} NesStatus;

// A loaded checkpoint.
typedef struct NesModel NesModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into the library on this thread.
const char *nes_last_error_message(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a nul-terminated string and `out` a writable pointer.
enum NesStatus nes_model_load(const char *path, struct NesModel **out);

// Parses a checkpoint held in memory.
//
// # Safety
// `bytes` must point to `len` readable bytes and `out` must be writable.
enum NesStatus nes_model_load_bytes(const uint8_t *bytes, size_t len, struct NesModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from a load function and not be used afterwards.
void nes_model_free(struct NesModel *model);

// Number of epitome-parameterized layers.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum NesStatus nes_model_layer_count(const struct NesModel *model, size_t *out);

// Number of f64 values in one input sample.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum NesStatus nes_model_input_len(const struct NesModel *model, size_t *out);

// Number of f64 values produced per sample.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum NesStatus nes_model_output_len(const struct NesModel *model, size_t *out);

// Learner-free inference of one sample laid out channels-last. Writes the
// outputs and, when `madd` is not null, the measured multiply-adds.
//
// # Safety
// `input` must hold `input_len` values, `output` room for `output_len`.
enum NesStatus nes_model_infer(const struct NesModel *model,
                               const double *input,
                               size_t input_len,
                               double *output,
                               size_t output_len,
                               uint64_t *madd);

// Logical weight shape `[w, h, C_in, C_out]` of an epitome layer.
//
// # Safety
// `model` must be a live handle and `shape` room for 4 values.
enum NesStatus nes_layer_weight_shape(const struct NesModel *model, size_t layer, size_t *shape);

// Expands an epitome layer with its routing-map indices into the full
// weight tensor, row-major over `[w, h, C_in, C_out]`.
//
// # Safety
// `out` must have room for `len` values.
enum NesStatus nes_layer_expand(const struct NesModel *model,
                                size_t layer,
                                double *out,
                                size_t len);

// Cost report as JSON for an architecture given as TOML text, or as the name
// of a bundled architecture. A `multiplier` in `(0, 1]` plans bottleneck
// epitomes first; 0 reports the architecture as written. Release the
// returned string with [`nes_string_free`].
//
// # Safety
// `config` must be a nul-terminated string and `out` writable.
enum NesStatus nes_cost_report_json(const char *config, double multiplier, char **out);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void nes_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NES_H */
