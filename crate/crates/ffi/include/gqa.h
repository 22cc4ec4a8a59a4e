#ifndef GQA_H
#define GQA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GqaStatus {
  GQA_STATUS_OK = 0,
  GQA_STATUS_NULL_ARGUMENT = 1,
  GQA_STATUS_INVALID_UTF8 = 2,
  GQA_STATUS_INVALID_INPUT = 3,
  GQA_STATUS_CONFIG = 4,
  GQA_STATUS_NOT_FOUND = 5,
  GQA_STATUS_INVALID_STATE = 6,
  GQA_STATUS_PARSE_FAILURE = 7,
  GQA_STATUS_UNAVAILABLE = 8,
  GQA_STATUS_INTERNAL = 9,
  GQA_STATUS_PANIC = 10,
} GqaStatus;

/**
 * Opaque engine handle.
 */
typedef struct GqaEngine GqaEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message from the last failed call on this thread, or null. Owned by the
 * library and valid until the next call on the same thread.
 */
const char *gqa_last_error(void);

/**
 * Builds an engine from a config file.
 *
 * # Safety
 * `config_path` must be a valid C string and `out` a valid pointer.
 */
enum GqaStatus gqa_engine_open(const char *config_path, struct GqaEngine **out);

/**
 * Engine over built-in demo documents and a scripted model backend, with
 * nothing written to disk.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GqaStatus gqa_engine_open_demo(struct GqaEngine **out);

/**
 * Runs one question and writes the reply record as JSON to `out_json`.
 *
 * # Safety
 * `engine` must come from an open function; string arguments must be valid
 * C strings; `out_json` must be a valid pointer.
 */
enum GqaStatus gqa_engine_query(const struct GqaEngine *engine,
                                const char *group_id,
                                const char *user_id,
                                const char *text,
                                int64_t timestamp,
                                char **out_json);

/**
 * Recalls a sent reply; writes the updated record as JSON to `out_json`.
 *
 * # Safety
 * As for [`gqa_engine_query`].
 */
enum GqaStatus gqa_engine_withdraw(const struct GqaEngine *engine,
                                   const char *reply_id,
                                   char **out_json);

/**
 * # Safety
 * `engine` is null or came from an open function and is not used again.
 */
void gqa_engine_free(struct GqaEngine *engine);

/**
 * Parses a 0 to 10 score out of model output.
 *
 * # Safety
 * `raw` must be a valid C string and `out` a valid pointer.
 */
enum GqaStatus gqa_parse_score(const char *raw, uint8_t *out);

/**
 * Composite per-user key for a group member.
 *
 * # Safety
 * Arguments must be valid C strings and `out` a valid pointer.
 */
enum GqaStatus gqa_make_user_key(const char *group_id, const char *user_id, char **out);

/**
 * Token estimate used for budgeting.
 *
 * # Safety
 * `text` must be a valid C string and `out` a valid pointer.
 */
enum GqaStatus gqa_count_tokens(const char *text, size_t *out);

/**
 * # Safety
 * `s` is null or a string returned by this library, not freed before.
 */
void gqa_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GQA_H */
