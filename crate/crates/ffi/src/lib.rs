//! C ABI over the wattflow core.
//!
//! Conventions:
//! - Every fallible function returns a [`WfStatus`]; on failure a message is
//!   available from [`wf_last_error_message`] on the same thread.
//! - Complex values live behind opaque handles. Each `*_new`/`*_open`/`*_parse`
//!   has a matching `*_free`, which accepts NULL.
//! - Strings returned through `char **` out-parameters are owned by the
//!   caller and must be released with [`wf_string_free`].
//! - Panics never cross the boundary; they surface as `WF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use wattflow::aggregator::{Metrics, WorkerState};
use wattflow::history::{QueryError, RecordSink, SeriesStore};
use wattflow::msglog::partition_for;
use wattflow::records::{decode_record, encode_record, ActivePowerRecord, Record, SensorId};
use wattflow::registry::{ConfigurationEvent, HierarchyError, HierarchySpec, SensorHierarchy};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidRecord = 4,
    InvalidHierarchy = 5,
    UnknownSensor = 6,
    NotFound = 7,
    Io = 8,
    Panic = 9,
}

struct Failure {
    status: WfStatus,
    message: String,
}

impl Failure {
    fn new(status: WfStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<QueryError> for Failure {
    fn from(e: QueryError) -> Self {
        let status = match e {
            QueryError::Hierarchy(HierarchyError::UnknownSensor(_)) => WfStatus::UnknownSensor,
            _ => WfStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WfStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".into());
            set_last_error(&msg);
            WfStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller passes either NULL or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(WfStatus::NullArgument, format!("{name} is NULL")))
}

fn non_null_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: as above; the caller guarantees exclusive access for the call.
    unsafe { p.as_mut() }.ok_or_else(|| Failure::new(WfStatus::NullArgument, format!("{name} is NULL")))
}

fn out<T>(p: *mut T, name: &str, value: T) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure::new(WfStatus::NullArgument, format!("{name} is NULL")));
    }
    // SAFETY: non-null and, per the contract, valid for writes.
    unsafe { p.write(value) };
    Ok(())
}

fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(WfStatus::NullArgument, format!("{name} is NULL")));
    }
    // SAFETY: non-null, and the caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::new(WfStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn string_out(p: *mut *mut c_char, name: &str, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure::new(WfStatus::InvalidArgument, "string contains NUL"))?;
    out(p, name, c.into_raw())
}

fn sensor_id(p: *const c_char) -> Result<SensorId, Failure> {
    SensorId::new(str_arg(p, "identifier")?).map_err(|e| Failure::new(WfStatus::InvalidRecord, e.to_string()))
}

fn record(id: *const c_char, timestamp: i64, value_in_w: f64) -> Result<ActivePowerRecord, Failure> {
    ActivePowerRecord::new(sensor_id(id)?, timestamp, value_in_w)
        .map_err(|e| Failure::new(WfStatus::InvalidRecord, e.to_string()))
}

/// Message of the last failure on the calling thread, or NULL. Valid until
/// the next failing call on this thread; do not free.
#[no_mangle]
pub extern "C" fn wf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn wf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Partition of `key` among `partitions` partitions, as used by the log.
///
/// # Safety
/// `key` must be valid for `len` bytes (it may be NULL when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn wf_partition_for(key: *const u8, len: usize, partitions: u32, out_partition: *mut u32) -> WfStatus {
    guard(|| {
        if partitions == 0 {
            return Err(Failure::new(WfStatus::InvalidArgument, "partition count must be at least 1"));
        }
        let bytes = if len == 0 {
            &[][..]
        } else {
            if key.is_null() {
                return Err(Failure::new(WfStatus::NullArgument, "key is NULL"));
            }
            std::slice::from_raw_parts(key, len)
        };
        out(out_partition, "out_partition", partition_for(bytes, partitions))
    })
}

/// Canonical JSON of an active-power record.
///
/// # Safety
/// `identifier` must be a NUL-terminated string; `out_json` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_record_encode(
    identifier: *const c_char,
    timestamp: i64,
    value_in_w: f64,
    out_json: *mut *mut c_char,
) -> WfStatus {
    guard(|| {
        let r = record(identifier, timestamp, value_in_w)?;
        let bytes = encode_record(&r.into()).map_err(|e| Failure::new(WfStatus::InvalidRecord, e.to_string()))?;
        string_out(out_json, "out_json", String::from_utf8(bytes).expect("JSON is UTF-8"))
    })
}

/// Decodes an active-power record. The identifier is returned as an owned
/// string.
///
/// # Safety
/// `json` must be a NUL-terminated string; the out pointers must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_record_decode(
    json: *const c_char,
    out_identifier: *mut *mut c_char,
    out_timestamp: *mut i64,
    out_value_in_w: *mut f64,
) -> WfStatus {
    guard(|| {
        let r = match decode_record(str_arg(json, "json")?.as_bytes()) {
            Ok(Record::ActivePower(r)) => r,
            Ok(Record::Aggregated(_)) => {
                return Err(Failure::new(WfStatus::InvalidRecord, "expected an active-power record"))
            }
            Err(e) => return Err(Failure::new(WfStatus::InvalidRecord, e.to_string())),
        };
        if out_identifier.is_null() || out_timestamp.is_null() || out_value_in_w.is_null() {
            return Err(Failure::new(WfStatus::NullArgument, "output pointer is NULL"));
        }
        out(out_timestamp, "out_timestamp", r.timestamp)?;
        out(out_value_in_w, "out_value_in_w", r.value_in_w)?;
        string_out(out_identifier, "out_identifier", r.identifier.into_string())
    })
}

/// A validated sensor hierarchy.
pub struct WfHierarchy {
    inner: SensorHierarchy,
}

/// Parses a hierarchy in nested (`{"root": ...}`) or flat (`{"nodes": [...]}`)
/// form and assigns it `version`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_hierarchy` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn wf_hierarchy_parse(json: *const c_char, version: u64, out_hierarchy: *mut *mut WfHierarchy) -> WfStatus {
    guard(|| {
        let spec: HierarchySpec = serde_json::from_str(str_arg(json, "json")?)
            .map_err(|e| Failure::new(WfStatus::InvalidHierarchy, e.to_string()))?;
        let inner = SensorHierarchy::build(version, spec).map_err(|violations| {
            let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
            Failure::new(WfStatus::InvalidHierarchy, msgs.join("; "))
        })?;
        out(out_hierarchy, "out_hierarchy", Box::into_raw(Box::new(WfHierarchy { inner })))
    })
}

/// # Safety
/// `h` must be NULL or come from [`wf_hierarchy_parse`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wf_hierarchy_free(h: *mut WfHierarchy) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live hierarchy handle; `out_version` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_hierarchy_version(h: *const WfHierarchy, out_version: *mut u64) -> WfStatus {
    guard(|| out(out_version, "out_version", non_null(h, "hierarchy")?.inner.version()))
}

/// The hierarchy as nested JSON with its version.
///
/// # Safety
/// `h` must be a live hierarchy handle; `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_hierarchy_to_json(h: *const WfHierarchy, out_json: *mut *mut c_char) -> WfStatus {
    guard(|| {
        let json = serde_json::to_string(&non_null(h, "hierarchy")?.inner).expect("hierarchy serializes");
        string_out(out_json, "out_json", json)
    })
}

/// Groups containing `identifier`, nearest first, as a JSON array.
///
/// # Safety
/// `h` must be a live hierarchy handle; `identifier` a NUL-terminated
/// string; `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_hierarchy_ancestors(
    h: *const WfHierarchy,
    identifier: *const c_char,
    out_json: *mut *mut c_char,
) -> WfStatus {
    guard(|| {
        let h = non_null(h, "hierarchy")?;
        let ancestors = h
            .inner
            .ancestors(str_arg(identifier, "identifier")?)
            .map_err(|e| Failure::new(WfStatus::UnknownSensor, e.to_string()))?;
        string_out(out_json, "out_json", serde_json::to_string(&ancestors).expect("ids serialize"))
    })
}

/// Statistics over a set of power values. When `count` is 0 only `count`
/// and `sum_in_w` are meaningful.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WfStats {
    pub count: u64,
    pub sum_in_w: f64,
    pub average_in_w: f64,
    pub min_in_w: f64,
    pub max_in_w: f64,
    pub timestamp: i64,
}

/// In-process aggregation engine: the same state machine the aggregator
/// workers run, without the log.
pub struct WfAggregator {
    state: WorkerState,
}

/// # Safety
/// `h` must be a live hierarchy handle (it is copied); `out_aggregator`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_aggregator_new(h: *const WfHierarchy, out_aggregator: *mut *mut WfAggregator) -> WfStatus {
    guard(|| {
        let hierarchy = Arc::new(non_null(h, "hierarchy")?.inner.clone());
        let state = WorkerState::new(hierarchy, Arc::new(Metrics::default()));
        out(out_aggregator, "out_aggregator", Box::into_raw(Box::new(WfAggregator { state })))
    })
}

/// # Safety
/// `a` must be NULL or come from [`wf_aggregator_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wf_aggregator_free(a: *mut WfAggregator) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Feeds one measurement. Writes the number of aggregates it produced (one
/// per ancestor group, fewer for late records; 0 for unknown sensors).
///
/// # Safety
/// `a` must be a live aggregator handle; `identifier` a NUL-terminated
/// string; `out_emitted` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_aggregator_push(
    a: *mut WfAggregator,
    identifier: *const c_char,
    timestamp: i64,
    value_in_w: f64,
    out_emitted: *mut u32,
) -> WfStatus {
    guard(|| {
        let a = non_null_mut(a, "aggregator")?;
        let r = record(identifier, timestamp, value_in_w)?;
        let mut emitted = 0u32;
        for (group, grouped) in a.state.fan_out(&r) {
            if a.state.process_grouped(&group, &grouped).is_some() {
                emitted += 1;
            }
        }
        if !out_emitted.is_null() {
            out_emitted.write(emitted);
        }
        Ok(())
    })
}

/// Current aggregate of `group`. `timestamp` is that of the newest value
/// in the group. Returns `WF_STATUS_NOT_FOUND` if the group has no data.
///
/// # Safety
/// `a` must be a live aggregator handle; `group` a NUL-terminated string;
/// `out_stats` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_aggregator_current(a: *const WfAggregator, group: *const c_char, out_stats: *mut WfStats) -> WfStatus {
    guard(|| {
        let a = non_null(a, "aggregator")?;
        let group = str_arg(group, "group")?;
        let history = a
            .state
            .history(group)
            .ok_or_else(|| Failure::new(WfStatus::NotFound, format!("no data for group {group}")))?;
        let newest = history.last_values().values().map(|(ts, _)| *ts).max().unwrap_or(0);
        let agg = history
            .compute_stats(newest)
            .ok_or_else(|| Failure::new(WfStatus::NotFound, format!("no data for group {group}")))?;
        out(
            out_stats,
            "out_stats",
            WfStats {
                count: agg.count,
                sum_in_w: agg.sum_in_w,
                average_in_w: agg.average_in_w,
                min_in_w: agg.min_in_w,
                max_in_w: agg.max_in_w,
                timestamp: agg.timestamp,
            },
        )
    })
}

/// Switches to a new hierarchy, dropping leaves that left a group. Writes
/// how many (group, leaf) entries were removed. An older or equal version
/// is ignored and reports 0.
///
/// # Safety
/// `a` and `h` must be live handles; `out_removed` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_aggregator_set_hierarchy(a: *mut WfAggregator, h: *const WfHierarchy, out_removed: *mut u32) -> WfStatus {
    guard(|| {
        let a = non_null_mut(a, "aggregator")?;
        let event = ConfigurationEvent::new(non_null(h, "hierarchy")?.inner.clone());
        let removed = a.state.apply_config_event(&event).map_or(0, |r| r.len());
        if !out_removed.is_null() {
            out_removed.write(removed as u32);
        }
        Ok(())
    })
}

/// Time-series store for records of both kinds.
pub struct WfStore {
    inner: SeriesStore,
}

/// Opens a durable store in directory `path`, or an in-memory one if `path`
/// is NULL.
///
/// # Safety
/// `path` must be NULL or a NUL-terminated string; `out_store` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_store_open(path: *const c_char, out_store: *mut *mut WfStore) -> WfStatus {
    guard(|| {
        let inner = if path.is_null() {
            SeriesStore::in_memory()
        } else {
            SeriesStore::open(str_arg(path, "path")?).map_err(|e| Failure::new(WfStatus::Io, e.to_string()))?
        };
        out(out_store, "out_store", Box::into_raw(Box::new(WfStore { inner })))
    })
}

/// Flushes and closes the store. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or come from [`wf_store_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wf_store_free(s: *mut WfStore) {
    if !s.is_null() {
        let store = Box::from_raw(s);
        let _ = store.inner.sync();
    }
}

/// # Safety
/// `s` must be a live store handle; `identifier` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wf_store_append(s: *const WfStore, identifier: *const c_char, timestamp: i64, value_in_w: f64) -> WfStatus {
    guard(|| {
        let s = non_null(s, "store")?;
        let r = record(identifier, timestamp, value_in_w)?;
        s.inner.append(r.into()).map_err(|e| Failure::new(WfStatus::Io, e.to_string()))
    })
}

/// Appends one record of either kind in its canonical JSON form.
///
/// # Safety
/// `s` must be a live store handle; `json` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wf_store_append_json(s: *const WfStore, json: *const c_char) -> WfStatus {
    guard(|| {
        let s = non_null(s, "store")?;
        let r = decode_record(str_arg(json, "json")?.as_bytes())
            .map_err(|e| Failure::new(WfStatus::InvalidRecord, e.to_string()))?;
        s.inner.append(r).map_err(|e| Failure::new(WfStatus::Io, e.to_string()))
    })
}

/// Makes every appended record durable.
///
/// # Safety
/// `s` must be a live store handle.
#[no_mangle]
pub unsafe extern "C" fn wf_store_sync(s: *const WfStore) -> WfStatus {
    guard(|| non_null(s, "store")?.inner.sync().map_err(|e| Failure::new(WfStatus::Io, e.to_string())))
}

/// Statistics of `identifier` over `[from, to)`. `timestamp` is unused.
///
/// # Safety
/// `s` must be a live store handle; `identifier` a NUL-terminated string;
/// `out_stats` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_store_stats(
    s: *const WfStore,
    identifier: *const c_char,
    from: i64,
    to: i64,
    out_stats: *mut WfStats,
) -> WfStatus {
    guard(|| {
        let s = non_null(s, "store")?;
        let st = s.inner.stats(str_arg(identifier, "identifier")?, from, to)?;
        out(
            out_stats,
            "out_stats",
            WfStats {
                count: st.count,
                sum_in_w: st.sum_in_w,
                average_in_w: st.average_in_w.unwrap_or(0.0),
                min_in_w: st.min_in_w.unwrap_or(0.0),
                max_in_w: st.max_in_w.unwrap_or(0.0),
                timestamp: 0,
            },
        )
    })
}

/// Newest record of `identifier` as JSON, or `WF_STATUS_NOT_FOUND`.
///
/// # Safety
/// `s` must be a live store handle; `identifier` a NUL-terminated string;
/// `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_store_latest(s: *const WfStore, identifier: *const c_char, out_json: *mut *mut c_char) -> WfStatus {
    guard(|| {
        let s = non_null(s, "store")?;
        let id = str_arg(identifier, "identifier")?;
        let r = s
            .inner
            .latest(id)
            .ok_or_else(|| Failure::new(WfStatus::NotFound, format!("no data for sensor {id}")))?;
        let bytes = encode_record(&r).map_err(|e| Failure::new(WfStatus::InvalidRecord, e.to_string()))?;
        string_out(out_json, "out_json", String::from_utf8(bytes).expect("JSON is UTF-8"))
    })
}
