#ifndef NUMIS_H
#define NUMIS_H

/* Generated by cbindgen from the numis-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes mirroring the CLI's exit-code taxonomy.
 */
typedef enum NumisStatus {
  NUMIS_STATUS_OK = 0,
  /*
   A required pointer argument was null.
   */
  NUMIS_STATUS_NULL_ARGUMENT = 1,
  /*
   Malformed UTF-8, unknown stage name, or invalid configuration.
   */
  NUMIS_STATUS_INVALID_ARGUMENT = 2,
  /*
   Missing or unreadable data, including unmet stage prerequisites.
   */
  NUMIS_STATUS_DATA_ERROR = 3,
  /*
   Non-finite loss or other numeric breakdown.
   */
  NUMIS_STATUS_NUMERIC_ERROR = 4,
} NumisStatus;

/*
 Opaque pipeline configuration handle.
 */
typedef struct NumisConfig NumisConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Last error message for this thread, or an empty string. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *numis_last_error(void);

/*
 Loads a pipeline config from a TOML file into `*out`.

 # Safety
 `path` must be a NUL-terminated string; `out` must be a valid pointer.
 A handle stored through `out` must be released with `numis_config_free`.
 */
enum NumisStatus numis_config_load(const char *path, struct NumisConfig **out);

/*
 Overrides the config seed (the CLI's `--seed`).

 # Safety
 `config` must be a live handle from `numis_config_load`.
 */
enum NumisStatus numis_config_set_seed(struct NumisConfig *config, uint64_t seed);

/*
 Redirects all stage artifacts under a different root directory.

 # Safety
 `config` must be a live handle; `dir` a NUL-terminated string.
 */
enum NumisStatus numis_config_set_output_root(struct NumisConfig *config, const char *dir);

/*
 Releases a config handle. Null is a no-op.

 # Safety
 `config` must be null or a handle not freed before.
 */
void numis_config_free(struct NumisConfig *config);

/*
 Runs one pipeline stage by its CLI name (e.g. "prepare", "train-vit").
 Sets `*ran` to 1 when work was done, 0 when the stage was already up to
 date (pass `force` != 0 to rerun regardless).

 # Safety
 `config` must be a live handle; `stage` a NUL-terminated string; `ran`
 may be null when the caller does not care.
 */
enum NumisStatus numis_run_stage(const struct NumisConfig *config,
                                 const char *stage,
                                 int32_t force,
                                 int32_t *ran);

/*
 Segments a single image file with default parameters, writing the reverse
 crop to `output_png` when accepted. `*accepted` is set to 1 on acceptance,
 0 on rejection (the cause is available via `numis_last_error`).

 # Safety
 Both paths must be NUL-terminated strings; `accepted` must be valid.
 */
enum NumisStatus numis_segment_file(const char *input_path,
                                    const char *output_png,
                                    int32_t *accepted);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NUMIS_H */
