#ifndef DRDOS_FFI_H
#define DRDOS_FFI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DRDOS_STATUS_OK = 0,
  DRDOS_STATUS_NULL_ARGUMENT = 1,
  DRDOS_STATUS_INVALID_UTF8 = 2,
  DRDOS_STATUS_CONFIG_ERROR = 3,
  DRDOS_STATUS_PARSE_ERROR = 4,
  DRDOS_STATUS_PIPELINE_ERROR = 5,
  /**
   * The event queue is empty.
   */
  DRDOS_STATUS_NO_EVENT = 6,
  DRDOS_STATUS_PANIC = 7,
} DrdosStatus;

/**
 * Opaque pipeline handle.
 */
typedef struct DrdosPipeline DrdosPipeline;

/**
 * Creates a pipeline. `config_toml` may be null for defaults;
 * `prefix_table` holds the table text ("<cidr> <asn>" lines).
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be valid
 * for writes.
 */
DrdosStatus drdos_pipeline_new(const char *config_toml,
                               const char *prefix_table,
                               DrdosPipeline **out);

/**
 * # Safety
 * `p` must be null or a handle from [`drdos_pipeline_new`] not yet freed.
 */
void drdos_pipeline_free(DrdosPipeline *p);

/**
 * Feeds one replay JSON line. Malformed lines return `ParseError` and
 * leave the pipeline untouched.
 *
 * # Safety
 * `p` must be a live handle; `line` NUL-terminated.
 */
DrdosStatus drdos_pipeline_push_replay_line(DrdosPipeline *p, const char *line);

/**
 * Feeds one NetFlow v9 datagram. Templates are cached per `exporter_id`,
 * a caller-chosen identity of the sending device.
 *
 * # Safety
 * `p` must be a live handle; `data` valid for `len` bytes.
 */
DrdosStatus drdos_pipeline_push_netflow(DrdosPipeline *p,
                                        uint64_t exporter_id,
                                        const uint8_t *data,
                                        size_t len);

/**
 * Moves the clock to `watermark` (epoch seconds), closing due intervals.
 *
 * # Safety
 * `p` must be a live handle.
 */
DrdosStatus drdos_pipeline_advance(DrdosPipeline *p, uint64_t watermark);

/**
 * Ends the input: remaining intervals close and open sessions are
 * flushed as truncated.
 *
 * # Safety
 * `p` must be a live handle.
 */
DrdosStatus drdos_pipeline_finish(DrdosPipeline *p);

/**
 * Pops the oldest pending event as a JSON object with an `"event"` tag.
 * Returns `NoEvent` (and writes null) when nothing is pending.
 *
 * # Safety
 * `p` must be a live handle; `out` valid for writes.
 */
DrdosStatus drdos_pipeline_next_event(DrdosPipeline *p, char **out);

/**
 * Number of events waiting in the queue.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
size_t drdos_pipeline_pending(const DrdosPipeline *p);

/**
 * Operational counters as a JSON object.
 *
 * # Safety
 * `p` must be a live handle; `out` valid for writes.
 */
DrdosStatus drdos_pipeline_counters(DrdosPipeline *p, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void drdos_string_free(char *s);

/**
 * Message for the calling thread's most recent failure, or null. Valid
 * until the next failing call on the same thread.
 */
const char *drdos_last_error(void);

/**
 * Static version string.
 */
const char *drdos_version(void);

/**
 * Normalized Shannon entropy of per-source byte counts (0 for fewer than
 * two non-zero sources).
 *
 * # Safety
 * `bytes` must be valid for `n` values (may be null when `n` is 0).
 */
double drdos_normalized_entropy(const uint64_t *bytes, size_t n);

/**
 * One step of the moving mean/variance model.
 *
 * # Safety
 * Output pointers must be valid for writes.
 */
DrdosStatus drdos_ewma_update(double mu,
                              double var,
                              double b,
                              double alpha,
                              double *out_mu,
                              double *out_var);

#endif  /* DRDOS_FFI_H */
