#ifndef WATTFLOW_H
#define WATTFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WfStatus {
  WF_STATUS_OK = 0,
  WF_STATUS_NULL_ARGUMENT = 1,
  WF_STATUS_INVALID_UTF8 = 2,
  WF_STATUS_INVALID_ARGUMENT = 3,
  WF_STATUS_INVALID_RECORD = 4,
  WF_STATUS_INVALID_HIERARCHY = 5,
  WF_STATUS_UNKNOWN_SENSOR = 6,
  WF_STATUS_NOT_FOUND = 7,
  WF_STATUS_IO = 8,
  WF_STATUS_PANIC = 9,
} WfStatus;

// In-process aggregation engine: the same state machine the aggregator
// workers run, without the log.
typedef struct WfAggregator WfAggregator;

// A validated sensor hierarchy.
typedef struct WfHierarchy WfHierarchy;

// Time-series store for records of both kinds.
typedef struct WfStore WfStore;

// Statistics over a set of power values. When `count` is 0 only `count`
// and `sum_in_w` are meaningful.
typedef struct WfStats {
  uint64_t count;
  double sum_in_w;
  double average_in_w;
  double min_in_w;
  double max_in_w;
  int64_t timestamp;
} WfStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on the calling thread, or NULL. Valid until
// the next failing call on this thread; do not free.
const char *wf_last_error_message(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed before.
void wf_string_free(char *s);

// Partition of `key` among `partitions` partitions, as used by the log.
//
// # Safety
// `key` must be valid for `len` bytes (it may be NULL when `len` is 0).
enum WfStatus wf_partition_for(const uint8_t *key,
                               size_t len,
                               uint32_t partitions,
                               uint32_t *out_partition);

// Canonical JSON of an active-power record.
//
// # Safety
// `identifier` must be a NUL-terminated string; `out_json` must be valid
// for writes.
enum WfStatus wf_record_encode(const char *identifier,
                               int64_t timestamp,
                               double value_in_w,
                               char **out_json);

// Decodes an active-power record. The identifier is returned as an owned
// string.
//
// # Safety
// `json` must be a NUL-terminated string; the out pointers must be valid
// for writes.
enum WfStatus wf_record_decode(const char *json,
                               char **out_identifier,
                               int64_t *out_timestamp,
                               double *out_value_in_w);

// Parses a hierarchy in nested (`{"root": ...}`) or flat (`{"nodes": [...]}`)
// form and assigns it `version`.
//
// # Safety
// `json` must be a NUL-terminated string; `out_hierarchy` must be valid for
// writes.
enum WfStatus wf_hierarchy_parse(const char *json,
                                 uint64_t version,
                                 struct WfHierarchy **out_hierarchy);

// # Safety
// `h` must be NULL or come from [`wf_hierarchy_parse`] and not be used afterwards.
void wf_hierarchy_free(struct WfHierarchy *h);

// # Safety
// `h` must be a live hierarchy handle; `out_version` valid for writes.
enum WfStatus wf_hierarchy_version(const struct WfHierarchy *h, uint64_t *out_version);

// The hierarchy as nested JSON with its version.
//
// # Safety
// `h` must be a live hierarchy handle; `out_json` valid for writes.
enum WfStatus wf_hierarchy_to_json(const struct WfHierarchy *h, char **out_json);

// Groups containing `identifier`, nearest first, as a JSON array.
//
// # Safety
// `h` must be a live hierarchy handle; `identifier` a NUL-terminated
// string; `out_json` valid for writes.
enum WfStatus wf_hierarchy_ancestors(const struct WfHierarchy *h,
                                     const char *identifier,
                                     char **out_json);

// # Safety
// `h` must be a live hierarchy handle (it is copied); `out_aggregator`
// valid for writes.
enum WfStatus wf_aggregator_new(const struct WfHierarchy *h, struct WfAggregator **out_aggregator);

// # Safety
// `a` must be NULL or come from [`wf_aggregator_new`] and not be used afterwards.
void wf_aggregator_free(struct WfAggregator *a);

// Feeds one measurement. Writes the number of aggregates it produced (one
// per ancestor group, fewer for late records; 0 for unknown sensors).
//
// # Safety
// `a` must be a live aggregator handle; `identifier` a NUL-terminated
// string; `out_emitted` NULL or valid for writes.
enum WfStatus wf_aggregator_push(struct WfAggregator *a,
                                 const char *identifier,
                                 int64_t timestamp,
                                 double value_in_w,
                                 uint32_t *out_emitted);

// Current aggregate of `group`. `timestamp` is that of the newest value
// in the group. Returns `WF_STATUS_NOT_FOUND` if the group has no data.
//
// # Safety
// `a` must be a live aggregator handle; `group` a NUL-terminated string;
// `out_stats` valid for writes.
enum WfStatus wf_aggregator_current(const struct WfAggregator *a,
                                    const char *group,
                                    struct WfStats *out_stats);

// Switches to a new hierarchy, dropping leaves that left a group. Writes
// how many (group, leaf) entries were removed. An older or equal version
// is ignored and reports 0.
//
// # Safety
// `a` and `h` must be live handles; `out_removed` NULL or valid for writes.
enum WfStatus wf_aggregator_set_hierarchy(struct WfAggregator *a,
                                          const struct WfHierarchy *h,
                                          uint32_t *out_removed);

// Opens a durable store in directory `path`, or an in-memory one if `path`
// is NULL.
//
// # Safety
// `path` must be NULL or a NUL-terminated string; `out_store` valid for writes.
enum WfStatus wf_store_open(const char *path, struct WfStore **out_store);

// Flushes and closes the store. NULL is ignored.
//
// # Safety
// `s` must be NULL or come from [`wf_store_open`] and not be used afterwards.
void wf_store_free(struct WfStore *s);

// # Safety
// `s` must be a live store handle; `identifier` a NUL-terminated string.
enum WfStatus wf_store_append(const struct WfStore *s,
                              const char *identifier,
                              int64_t timestamp,
                              double value_in_w);

// Appends one record of either kind in its canonical JSON form.
//
// # Safety
// `s` must be a live store handle; `json` a NUL-terminated string.
enum WfStatus wf_store_append_json(const struct WfStore *s, const char *json);

// Makes every appended record durable.
//
// # Safety
// `s` must be a live store handle.
enum WfStatus wf_store_sync(const struct WfStore *s);

// Statistics of `identifier` over `[from, to)`. `timestamp` is unused.
//
// # Safety
// `s` must be a live store handle; `identifier` a NUL-terminated string;
// `out_stats` valid for writes.
enum WfStatus wf_store_stats(const struct WfStore *s,
                             const char *identifier,
                             int64_t from,
                             int64_t to,
                             struct WfStats *out_stats);

// Newest record of `identifier` as JSON, or `WF_STATUS_NOT_FOUND`.
//
// # Safety
// `s` must be a live store handle; `identifier` a NUL-terminated string;
// `out_json` valid for writes.
enum WfStatus wf_store_latest(const struct WfStore *s, const char *identifier, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WATTFLOW_H */
