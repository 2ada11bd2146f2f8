/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef TOKENLENS_H
#define TOKENLENS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TlStatus {
  TL_STATUS_OK = 0,
  TL_STATUS_NULL_ARGUMENT = 1,
  TL_STATUS_INVALID_UTF8 = 2,
  TL_STATUS_DIMENSION = 3,
  TL_STATUS_DEGENERATE = 4,
  TL_STATUS_CONFIG = 5,
  TL_STATUS_MISSING_TENSOR = 6,
  TL_STATUS_TENSOR_SHAPE = 7,
  TL_STATUS_TRUNCATED = 8,
  TL_STATUS_NON_FINITE = 9,
  TL_STATUS_VERSION = 10,
  TL_STATUS_FORMAT = 11,
  TL_STATUS_COMPATIBILITY = 12,
  TL_STATUS_INPUT = 13,
  TL_STATUS_NOT_FOUND = 14,
  TL_STATUS_IO = 15,
  TL_STATUS_JSON = 16,
  TL_STATUS_IMAGE = 17,
  TL_STATUS_PANIC = 18,
} TlStatus;

/**
 * Loaded model bundle.
 */
typedef struct TlBundle TlBundle;

/**
 * Loaded vocabulary.
 */
typedef struct TlVocab TlVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tl_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call on the same thread.
 */
const char *tl_last_error_message(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void tl_string_free(char *s);

/**
 * Loads a bundle directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TlStatus tl_bundle_load(const char *path, struct TlBundle **out);

/**
 * # Safety
 * `bundle` must come from [`tl_bundle_load`] and not have been freed.
 */
void tl_bundle_free(struct TlBundle *bundle);

/**
 * Manifest and content id as JSON.
 *
 * # Safety
 * Pointers must be valid.
 */
enum TlStatus tl_bundle_summary(const struct TlBundle *bundle, char **out_json);

/**
 * Loads a vocabulary file; its id is the file stem.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TlStatus tl_vocab_load(const char *path, struct TlVocab **out);

/**
 * # Safety
 * `vocab` must come from [`tl_vocab_load`] and not have been freed.
 */
void tl_vocab_free(struct TlVocab *vocab);

/**
 * Number of entries, or 0 for NULL.
 *
 * # Safety
 * `vocab` must be NULL or a live handle.
 */
size_t tl_vocab_len(const struct TlVocab *vocab);

/**
 * Interpretations of token `(layer, position)`, or of every position of
 * `layer` when `position` is negative. `top_k == 0` keeps the full ranking.
 *
 * # Safety
 * Handles must be live; `image` must point to `image_len` bytes.
 */
enum TlStatus tl_interpret(const struct TlBundle *bundle,
                           const struct TlVocab *vocab,
                           const uint8_t *image,
                           size_t image_len,
                           size_t layer,
                           int64_t position,
                           size_t top_k,
                           char **out_json);

/**
 * Ranking of `vocab` against the final CLS embedding, optionally with an
 * intervention plan (JSON) applied. `plan_json` may be NULL.
 *
 * # Safety
 * Handles must be live; `image` must point to `image_len` bytes;
 * `plan_json` must be NULL or NUL-terminated.
 */
enum TlStatus tl_classify(const struct TlBundle *bundle,
                          const struct TlVocab *vocab,
                          const uint8_t *image,
                          size_t image_len,
                          const char *plan_json,
                          char **out_json);

/**
 * Rollout saliency grid and mask of token `(layer, position)`.
 *
 * # Safety
 * `bundle` must be live; `image` must point to `image_len` bytes.
 */
enum TlStatus tl_saliency(const struct TlBundle *bundle,
                          const uint8_t *image,
                          size_t image_len,
                          size_t layer,
                          size_t position,
                          char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOKENLENS_H */
