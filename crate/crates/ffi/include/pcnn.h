#ifndef PCNN_H
#define PCNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum PcnnStatus {
  PCNN_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PCNN_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PCNN_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid settings or an incompatible checkpoint version.
   */
  PCNN_STATUS_CONFIG = 3,
  /**
   * Malformed input: bad JSON, unreadable or corrupt file.
   */
  PCNN_STATUS_DATA = 4,
  /**
   * Numerical or internal failure.
   */
  PCNN_STATUS_RUNTIME = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  PCNN_STATUS_PANIC = 6,
} PcnnStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct PcnnModel PcnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file. On success `*out` receives a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PcnnStatus pcnn_model_load(const char *path, struct PcnnModel **out);

/**
 * Loads a checkpoint from an in-memory buffer.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` must be valid.
 */
enum PcnnStatus pcnn_model_load_bytes(const uint8_t *data, size_t len, struct PcnnModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from a load function and not be used afterwards.
 */
void pcnn_model_free(struct PcnnModel *model);

/**
 * Contradiction probability for one article given as a corpus record,
 * `{"page_id", "rev_id", "title", "label", "paragraphs": [[sentence]]}`.
 *
 * # Safety
 * `model` must be a live handle, `article_json` NUL-terminated and
 * `out_prob` valid.
 */
enum PcnnStatus pcnn_predict_prob(const struct PcnnModel *model,
                                  const char *article_json,
                                  double *out_prob);

/**
 * Prediction with ranked sentence pairs as JSON. `top` limits the pair
 * list; 0 returns every pair. The result must be freed with
 * [`pcnn_string_free`].
 *
 * # Safety
 * `model` must be a live handle, `article_json` NUL-terminated and `out`
 * valid.
 */
enum PcnnStatus pcnn_explain_json(const struct PcnnModel *model,
                                  const char *article_json,
                                  size_t top,
                                  char **out);

/**
 * Same as [`pcnn_explain_json`] for plain text; blank lines separate
 * paragraphs.
 *
 * # Safety
 * `model` must be a live handle, `text` NUL-terminated and `out` valid.
 */
enum PcnnStatus pcnn_explain_text(const struct PcnnModel *model,
                                  const char *text,
                                  size_t top,
                                  char **out);

/**
 * Model and encoder configuration as JSON.
 *
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum PcnnStatus pcnn_model_config_json(const struct PcnnModel *model, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void pcnn_string_free(char *s);

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next library call on the same thread.
 */
const char *pcnn_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *pcnn_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCNN_H */
