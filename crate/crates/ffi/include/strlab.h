#ifndef STRLAB_H
#define STRLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StrlabStatus {
  STRLAB_STATUS_OK = 0,
  STRLAB_STATUS_NULL_POINTER = 1,
  STRLAB_STATUS_INVALID_UTF8 = 2,
  STRLAB_STATUS_IO = 3,
  STRLAB_STATUS_BAD_CHECKPOINT = 4,
  STRLAB_STATUS_BAD_IMAGE = 5,
  STRLAB_STATUS_BUFFER_TOO_SMALL = 6,
  STRLAB_STATUS_INVALID_ARGUMENT = 7,
  STRLAB_STATUS_INTERNAL = 8,
} StrlabStatus;

// A loaded recognizer. Create with [`strlab_model_load`], release with
// [`strlab_model_free`].
typedef struct StrlabModel StrlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on this thread.
const char *strlab_last_error_message(void);

// Library version as a static string.
const char *strlab_version(void);

// Loads a checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum StrlabStatus strlab_model_load(const char *path, struct StrlabModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`strlab_model_load`] and not be used again.
void strlab_model_free(struct StrlabModel *model);

// Input size the model resizes every image to.
//
// # Safety
// All pointers must be valid.
enum StrlabStatus strlab_model_input_size(const struct StrlabModel *model,
                                          size_t *height,
                                          size_t *width);

// Output classes including the CTC blank.
//
// # Safety
// All pointers must be valid.
enum StrlabStatus strlab_model_num_classes(const struct StrlabModel *model, size_t *out);

// Recognizes a row-major grayscale image with values in [0, 1].
//
// # Safety
// `pixels` must hold `height * width` floats; `buf` must be valid for
// `len` bytes or null; `needed` must be valid.
enum StrlabStatus strlab_model_recognize(const struct StrlabModel *model,
                                         const float *pixels,
                                         size_t height,
                                         size_t width,
                                         char *buf,
                                         size_t len,
                                         size_t *needed);

// Codepoint-level Levenshtein distance.
//
// # Safety
// `a`, `b` must be NUL-terminated strings and `out` valid.
enum StrlabStatus strlab_edit_distance(const char *a, const char *b, size_t *out);

// Label cleaning: zero-width, unassigned and private-use codepoints
// removed, then NFC.
//
// # Safety
// `input` must be a NUL-terminated string; `buf` valid for `len` bytes
// or null; `needed` valid.
enum StrlabStatus strlab_clean_text(const char *input, char *buf, size_t len, size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STRLAB_H */
