/* C interface to the batchcond simulation and inference engine. */

#ifndef BATCHCOND_H
#define BATCHCOND_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum BcStatus {
  /**
   * Success.
   */
  BcStatus_Ok = 0,
  /**
   * A required pointer argument was NULL.
   */
  BcStatus_NullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  BcStatus_InvalidUtf8 = 2,
  /**
   * The configuration failed to parse or validate.
   */
  BcStatus_InvalidConfig = 3,
  /**
   * The computation itself failed; see `bc_last_error`.
   */
  BcStatus_RuntimeError = 4,
} BcStatus;

/**
 * Opaque parsed-and-validated run configuration.
 */
typedef struct BcConfig BcConfig;

/**
 * Opaque set of per-replicate result rows.
 */
typedef struct BcRecords BcRecords;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on the calling thread.
 *
 * The pointer stays valid until the next failing call on the same thread;
 * the string is empty if no call has failed yet. Do not free it.
 */
const char *bc_last_error(void);

/**
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be a valid writable
 * pointer. On success `*out` owns a new configuration that must be released
 * with [`bc_config_free`].
 */
enum BcStatus bc_config_parse(const char *text, struct BcConfig **out);

/**
 * # Safety
 * `cfg` must be NULL or a pointer returned by [`bc_config_parse`] that has
 * not been freed yet.
 */
void bc_config_free(struct BcConfig *cfg);

/**
 * Run every replicate of the configured experiment.
 *
 * # Safety
 * `cfg` must be a live configuration handle; `out` must be a valid writable
 * pointer. On success `*out` owns a new record set that must be released
 * with [`bc_records_free`].
 */
enum BcStatus bc_replicate(const struct BcConfig *cfg, struct BcRecords **out);

/**
 * Number of rows in a record set (one row per replicate and procedure).
 *
 * # Safety
 * `records` must be NULL (returning 0) or a live record-set handle.
 */
uintptr_t bc_records_len(const struct BcRecords *records);

/**
 * Serialize the per-replicate rows as CSV.
 *
 * # Safety
 * `records` must be a live record-set handle; `out` must be a valid writable
 * pointer. On success `*out` owns a string to release with
 * [`bc_string_free`].
 */
enum BcStatus bc_records_to_csv(const struct BcRecords *records, char **out);

/**
 * Summarize a record set (one CSV row per procedure).
 *
 * # Safety
 * `records` must be a live record-set handle; `out` must be a valid writable
 * pointer. On success `*out` owns a string to release with
 * [`bc_string_free`].
 */
enum BcStatus bc_summary_to_csv(const struct BcRecords *records, char **out);

/**
 * # Safety
 * `records` must be NULL or a pointer returned by [`bc_replicate`] that has
 * not been freed yet.
 */
void bc_records_free(struct BcRecords *records);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library that has not been
 * freed yet.
 */
void bc_string_free(char *s);

/**
 * Coefficients of the two-batch pivot decomposition at second-batch share
 * `pi`: loadings on the first-batch difference, on the two information
 * statistics, and the standard deviation of the pure-noise residual.
 *
 * # Safety
 * All four out-pointers must be valid writable pointers.
 */
enum BcStatus bc_twobatch_decompose(double pi,
                                    double *out_a,
                                    double *out_b,
                                    double *out_c,
                                    double *out_sigma);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BATCHCOND_H */
