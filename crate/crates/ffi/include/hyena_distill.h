#ifndef HYENA_DISTILL_H
#define HYENA_DISTILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum HdStatus {
  HD_STATUS_OK = 0,
  HD_STATUS_NULL_POINTER = 1,
  HD_STATUS_INVALID_ARGUMENT = 2,
  HD_STATUS_BUFFER_TOO_SMALL = 3,
  HD_STATUS_SHAPE = 4,
  HD_STATUS_NUMERIC = 5,
  HD_STATUS_CONFIG = 6,
  HD_STATUS_IO = 7,
  HD_STATUS_CORRUPT = 8,
  HD_STATUS_MIXER_KIND = 9,
  HD_STATUS_PRECISION = 10,
  HD_STATUS_DATA = 11,
  HD_STATUS_PANIC = 12,
} HdStatus;

typedef enum HdMixer {
  HD_MIXER_ATTENTION = 0,
  HD_MIXER_HYENA = 1,
} HdMixer;

// Opaque decoder model.
typedef struct HdModel HdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hd_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t hd_last_error_message(char *buf, size_t len);

// Seeded attention decoder over the byte vocabulary.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum HdStatus hd_model_new_attention(size_t d_model,
                                     size_t n_heads,
                                     size_t n_layers,
                                     size_t context_len,
                                     uint64_t seed,
                                     struct HdModel **out);

// Seeded Hyena decoder with default operator settings.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum HdStatus hd_model_new_hyena(size_t d_model,
                                 size_t n_layers,
                                 size_t context_len,
                                 uint64_t seed,
                                 struct HdModel **out);

// Loads a 32-bit checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
enum HdStatus hd_model_load(const char *path, struct HdModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum HdStatus hd_model_save(const struct HdModel *model, const char *path);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void hd_model_free(struct HdModel *model);

// Architecture of a model.
//
// # Safety
// `model` must be a live handle; output pointers may be null.
enum HdStatus hd_model_info(const struct HdModel *model,
                            enum HdMixer *mixer,
                            size_t *d_model,
                            size_t *n_layers,
                            size_t *vocab_size,
                            size_t *context_len);

// Hex SHA-256 of the parameters, NUL-terminated. Needs 65 bytes.
//
// # Safety
// `model` must be a live handle and `buf` point to `len` writable bytes.
enum HdStatus hd_model_digest(const struct HdModel *model, char *buf, size_t len);

// Next-token logits, `n * vocab_size` floats row-major.
//
// # Safety
// `tokens` must hold `n` ids and `out` `out_len` floats.
enum HdStatus hd_model_logits(const struct HdModel *model,
                              const uint32_t *tokens,
                              size_t n,
                              float *out,
                              size_t out_len);

// Residual stream after layer `layer` (0-based), `n * d_model` floats.
//
// # Safety
// `tokens` must hold `n` ids and `out` `out_len` floats.
enum HdStatus hd_model_hidden(const struct HdModel *model,
                              const uint32_t *tokens,
                              size_t n,
                              size_t layer,
                              float *out,
                              size_t out_len);

// Byte tokens of `text` wrapped in BOS/EOS, `len + 2` ids.
//
// # Safety
// `text` must hold `len` bytes and `out` `out_len` ids.
enum HdStatus hd_tokenize(const uint8_t *text, size_t len, uint32_t *out, size_t out_len);

// Perplexity of `text` over consecutive non-overlapping windows of
// `context_len + 1` tokens; a trailing partial window is dropped.
//
// # Safety
// `text` must hold `len` bytes; `out` must be writable.
enum HdStatus hd_perplexity(const struct HdModel *model,
                            const uint8_t *text,
                            size_t len,
                            size_t context_len,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYENA_DISTILL_H */
