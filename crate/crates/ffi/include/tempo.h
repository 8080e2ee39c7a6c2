#ifndef TEMPO_H
#define TEMPO_H

/* Generated by cbindgen from the tempo-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum {
  TEMPO_OK = 0,
  TEMPO_INVALID_ARGUMENT = 1,
  TEMPO_ASSUMPTION_VIOLATED = 2,
  TEMPO_PARSE_ERROR = 3,
  TEMPO_BUFFER_TOO_SMALL = 4,
} TempoStatus;

/**
 * Verdict of the sufficient-only schedulability bounds.
 */
typedef enum {
  TEMPO_GUARANTEED = 0,
  TEMPO_INCONCLUSIVE = 1,
} TempoVerdict;

/**
 * Opaque parsed message.
 */
typedef struct TempoMessage TempoMessage;

/**
 * Opaque periodic task set under construction.
 */
typedef struct TempoTaskSet TempoTaskSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Most recent error message on this thread, valid until the next failing
 * call. Never null.
 */
const char *tempo_last_error(void);

/**
 * Creates an empty task set. Free with `tempo_taskset_free`.
 */
TempoTaskSet *tempo_taskset_new(void);

/**
 * # Safety
 * `ts` must be a pointer from `tempo_taskset_new` not yet freed.
 */
void tempo_taskset_free(TempoTaskSet *ts);

/**
 * Adds a task. `deadline_ms <= 0` defaults the deadline to the period.
 *
 * # Safety
 * `ts` must be a live task-set handle; `name` a NUL-terminated string.
 */
TempoStatus tempo_taskset_add(TempoTaskSet *ts,
                              const char *name,
                              double exec_ms,
                              double period_ms,
                              double deadline_ms,
                              double blocking_ms);

/**
 * Exact processor utilization factor.
 *
 * # Safety
 * `ts` live handle; `out` valid for one double.
 */
TempoStatus tempo_utilization(const TempoTaskSet *ts, double *out);

/**
 * Least upper rate-monotonic utilization bound for `n` tasks.
 *
 * # Safety
 * `out` valid for one double.
 */
TempoStatus tempo_rm_lub(size_t n, double *out);

/**
 * Rate-monotonic utilization-bound test (sufficient only).
 *
 * # Safety
 * `ts` live handle; `verdict` valid for one value.
 */
TempoStatus tempo_rm_schedulable(const TempoTaskSet *ts, TempoVerdict *verdict);

/**
 * EDF exact schedulability for implicit deadlines: writes 1 or 0.
 *
 * # Safety
 * `ts` live handle; `schedulable` valid for one int.
 */
TempoStatus tempo_edf_schedulable(const TempoTaskSet *ts, int32_t *schedulable);

/**
 * Blocking-aware rate-monotonic bound under priority inheritance.
 *
 * # Safety
 * `ts` live handle; `verdict` valid for one value.
 */
TempoStatus tempo_rm_pip_schedulable(const TempoTaskSet *ts, TempoVerdict *verdict);

/**
 * Iterative response-time analysis. Writes one value per task, in
 * rate-monotonic order, into `out_ms` (milliseconds; -1.0 marks a
 * divergent task). `cap` is the capacity of `out_ms`; the number of
 * tasks is written to `written`.
 *
 * # Safety
 * `ts` live handle; `out_ms` valid for `cap` doubles; `written` for one
 * size_t.
 */
TempoStatus tempo_response_times(const TempoTaskSet *ts,
                                 double *out_ms,
                                 size_t cap,
                                 size_t *written);

/**
 * Discrete-event schedule simulation with synchronous release. `edf`
 * selects the policy (0 = fixed-priority rate-monotonic), `pip` enables
 * priority inheritance, `horizon_ms <= 0` simulates one hyperperiod.
 * Writes the deadline-miss count and, when `worst_ms` has capacity, the
 * worst observed response time per task (-1.0 when a task never
 * finished a job).
 *
 * # Safety
 * `ts` live handle; `misses` valid for one uint64; `worst_ms` valid for
 * `cap` doubles (may be null with cap 0).
 */
TempoStatus tempo_simulate(const TempoTaskSet *ts,
                           int32_t edf,
                           int32_t pip,
                           double horizon_ms,
                           uint64_t *misses,
                           double *worst_ms,
                           size_t cap);

/**
 * Parses wire text (UTF-8, `len` bytes) into a message handle; null on
 * error (see `tempo_last_error`). Free with `tempo_message_free`.
 *
 * # Safety
 * `text` must point at `len` readable bytes.
 */
TempoMessage *tempo_message_parse(const char *text, size_t len);

/**
 * # Safety
 * `m` must be a handle from `tempo_message_parse` not yet freed.
 */
void tempo_message_free(TempoMessage *m);

/**
 * Canonical wire text of the message, NUL-terminated, owned by the
 * handle.
 *
 * # Safety
 * `m` live message handle.
 */
const char *tempo_message_serialize(const TempoMessage *m);

/**
 * # Safety
 * `m` live message handle.
 */
const char *tempo_message_type(const TempoMessage *m);

/**
 * # Safety
 * `m` live message handle.
 */
const char *tempo_message_profile(const TempoMessage *m);

/**
 * # Safety
 * `m` live message handle.
 */
uint64_t tempo_message_timestamp_ms(const TempoMessage *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TEMPO_H */
