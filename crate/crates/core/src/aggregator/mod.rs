//! Continuous hierarchical aggregation.
//!
//! Every raw record is copied once per ancestor group onto `grouped-records`
//! (keyed by the group), so all updates of one group land on one partition
//! and thus at one worker. That worker keeps the group's aggregation history,
//! the latest value of each leaf below it, and emits fresh statistics on
//! every update.

mod worker;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;

pub use worker::{
    run_worker, AggregatorError, ChangelogEntry, WorkerConfig, WorkerHandle, AGGREGATOR_GROUP, CHANGELOG_TOPIC,
};

use crate::records::{ActivePowerRecord, AggregatedActivePowerRecord, SensorId};
use crate::registry::{ConfigurationEvent, SensorHierarchy};

/// Latest value of every leaf below one aggregated sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationHistory {
    aggregated_sensor: SensorId,
    last_values: BTreeMap<SensorId, (i64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Update {
    Added,
    Replaced,
    /// Older than the stored value; the history is unchanged.
    Late,
}

impl AggregationHistory {
    pub fn new(aggregated_sensor: SensorId) -> Self {
        Self {
            aggregated_sensor,
            last_values: BTreeMap::new(),
        }
    }

    pub fn aggregated_sensor(&self) -> &SensorId {
        &self.aggregated_sensor
    }

    pub fn last_values(&self) -> &BTreeMap<SensorId, (i64, f64)> {
        &self.last_values
    }

    pub fn get(&self, leaf: &str) -> Option<(i64, f64)> {
        self.last_values.get(leaf).copied()
    }

    pub fn len(&self) -> usize {
        self.last_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last_values.is_empty()
    }

    /// Keeps the record if it is at least as recent as the stored one.
    pub fn update(&mut self, record: &ActivePowerRecord) -> Update {
        self.set(&record.identifier, record.timestamp, record.value_in_w)
    }

    fn set(&mut self, leaf: &SensorId, timestamp: i64, value: f64) -> Update {
        match self.last_values.get_mut(leaf) {
            Some(slot) if timestamp < slot.0 => Update::Late,
            Some(slot) => {
                *slot = (timestamp, value);
                Update::Replaced
            }
            None => {
                self.last_values.insert(leaf.clone(), (timestamp, value));
                Update::Added
            }
        }
    }

    /// Statistics over all stored values, stamped with the triggering
    /// record's timestamp. `None` while the history is empty.
    pub fn compute_stats(&self, trigger_timestamp: i64) -> Option<AggregatedActivePowerRecord> {
        AggregatedActivePowerRecord::from_values(
            self.aggregated_sensor.clone(),
            trigger_timestamp,
            self.last_values.values().map(|(_, v)| *v),
        )
    }

    fn remove_where(&mut self, mut gone: impl FnMut(&SensorId) -> bool) -> Vec<SensorId> {
        let removed: Vec<SensorId> = self.last_values.keys().filter(|l| gone(l)).cloned().collect();
        for leaf in &removed {
            self.last_values.remove(leaf);
        }
        removed
    }
}

/// One copy of `record` per ancestor of its sensor, keyed by the ancestor.
/// `None` if the sensor is not part of the hierarchy.
pub fn fan_out(record: &ActivePowerRecord, hierarchy: &SensorHierarchy) -> Option<Vec<(SensorId, ActivePowerRecord)>> {
    let ancestors = hierarchy.ancestors_iter(record.identifier.as_str()).ok()?;
    Some(ancestors.map(|a| (a.clone(), record.clone())).collect())
}

#[derive(Debug, Default)]
pub struct Metrics {
    processed_records_total: AtomicU64,
    grouped_records_total: AtomicU64,
    unknown_sensor_records: AtomicU64,
    late_records: AtomicU64,
    stale_grouped_records: AtomicU64,
    emitted_aggregates_total: AtomicU64,
    malformed_messages: AtomicU64,
}

impl Metrics {
    pub fn snapshot(&self) -> MetricsSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        MetricsSnapshot {
            processed_records_total: get(&self.processed_records_total),
            grouped_records_total: get(&self.grouped_records_total),
            unknown_sensor_records: get(&self.unknown_sensor_records),
            late_records: get(&self.late_records),
            stale_grouped_records: get(&self.stale_grouped_records),
            emitted_aggregates_total: get(&self.emitted_aggregates_total),
            malformed_messages: get(&self.malformed_messages),
        }
    }

    fn inc(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsSnapshot {
    pub processed_records_total: u64,
    pub grouped_records_total: u64,
    pub unknown_sensor_records: u64,
    pub late_records: u64,
    pub stale_grouped_records: u64,
    pub emitted_aggregates_total: u64,
    pub malformed_messages: u64,
}

impl MetricsSnapshot {
    fn fields(&self) -> [(&'static str, u64); 7] {
        [
            ("processed_records_total", self.processed_records_total),
            ("grouped_records_total", self.grouped_records_total),
            ("unknown_sensor_records", self.unknown_sensor_records),
            ("late_records", self.late_records),
            ("stale_grouped_records", self.stale_grouped_records),
            ("emitted_aggregates_total", self.emitted_aggregates_total),
            ("malformed_messages", self.malformed_messages),
        ]
    }

    /// Plain-text exposition, one `name value` line per counter.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, value) in self.fields() {
            let _ = writeln!(out, "{name} {value}");
        }
        out
    }

    /// Parses the output of [`render`](Self::render). Unknown lines are ignored.
    pub fn parse(text: &str) -> Self {
        let mut s = Self::default();
        for line in text.lines() {
            let Some((name, value)) = line.split_once(' ') else { continue };
            let Ok(v) = value.trim().parse::<u64>() else { continue };
            let slot = match name {
                "processed_records_total" => &mut s.processed_records_total,
                "grouped_records_total" => &mut s.grouped_records_total,
                "unknown_sensor_records" => &mut s.unknown_sensor_records,
                "late_records" => &mut s.late_records,
                "stale_grouped_records" => &mut s.stale_grouped_records,
                "emitted_aggregates_total" => &mut s.emitted_aggregates_total,
                "malformed_messages" => &mut s.malformed_messages,
                _ => continue,
            };
            *slot = v;
        }
        s
    }
}

impl std::ops::Add for MetricsSnapshot {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            processed_records_total: self.processed_records_total + o.processed_records_total,
            grouped_records_total: self.grouped_records_total + o.grouped_records_total,
            unknown_sensor_records: self.unknown_sensor_records + o.unknown_sensor_records,
            late_records: self.late_records + o.late_records,
            stale_grouped_records: self.stale_grouped_records + o.stale_grouped_records,
            emitted_aggregates_total: self.emitted_aggregates_total + o.emitted_aggregates_total,
            malformed_messages: self.malformed_messages + o.malformed_messages,
        }
    }
}

impl std::iter::Sum for MetricsSnapshot {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Aggregation state of one worker: its view of the hierarchy and the
/// histories of the groups it owns.
#[derive(Debug)]
pub struct WorkerState {
    hierarchy: Arc<SensorHierarchy>,
    histories: HashMap<SensorId, AggregationHistory>,
    metrics: Arc<Metrics>,
}

impl WorkerState {
    pub fn new(hierarchy: Arc<SensorHierarchy>, metrics: Arc<Metrics>) -> Self {
        Self {
            hierarchy,
            histories: HashMap::new(),
            metrics,
        }
    }

    pub fn hierarchy(&self) -> &Arc<SensorHierarchy> {
        &self.hierarchy
    }

    pub fn hierarchy_version(&self) -> u64 {
        self.hierarchy.version()
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    pub fn history(&self, group: &str) -> Option<&AggregationHistory> {
        self.histories.get(group)
    }

    pub fn histories(&self) -> impl Iterator<Item = &AggregationHistory> {
        self.histories.values()
    }

    /// Fans a raw record out to its ancestors, counting it as processed.
    pub fn fan_out(&self, record: &ActivePowerRecord) -> Vec<(SensorId, ActivePowerRecord)> {
        Metrics::inc(&self.metrics.processed_records_total);
        fan_out(record, &self.hierarchy).unwrap_or_else(|| {
            Metrics::inc(&self.metrics.unknown_sensor_records);
            Vec::new()
        })
    }

    /// Applies one grouped record to the history of `group` and returns the
    /// new aggregate. Records that are late, or whose sensor is not (or no
    /// longer) a leaf below `group`, leave the state untouched.
    pub fn process_grouped(&mut self, group: &SensorId, record: &ActivePowerRecord) -> Option<AggregatedActivePowerRecord> {
        Metrics::inc(&self.metrics.grouped_records_total);
        if !self.hierarchy.is_leaf_descendant(record.identifier.as_str(), group.as_str()) {
            Metrics::inc(&self.metrics.stale_grouped_records);
            return None;
        }
        let history = self
            .histories
            .entry(group.clone())
            .or_insert_with(|| AggregationHistory::new(group.clone()));
        if history.update(record) == Update::Late {
            Metrics::inc(&self.metrics.late_records);
            return None;
        }
        let aggregate = history.compute_stats(record.timestamp);
        if aggregate.is_some() {
            Metrics::inc(&self.metrics.emitted_aggregates_total);
        }
        aggregate
    }

    /// Switches to the event's hierarchy and drops every history entry that
    /// no longer belongs. Returns the dropped `(group, leaf)` pairs, or
    /// `None` if the event is not newer than the current hierarchy.
    pub fn apply_config_event(&mut self, event: &ConfigurationEvent) -> Option<Vec<(SensorId, SensorId)>> {
        if event.version <= self.hierarchy.version() {
            return None;
        }
        self.hierarchy = Arc::new(event.full_hierarchy.clone());
        let h = &self.hierarchy;
        let mut removed = Vec::new();
        self.histories.retain(|group, history| {
            let leaves = history.remove_where(|leaf| !h.is_leaf_descendant(leaf.as_str(), group.as_str()));
            removed.extend(leaves.into_iter().map(|l| (group.clone(), l)));
            !history.is_empty()
        });
        Some(removed)
    }

    /// Restores one history entry, unless it contradicts the current
    /// hierarchy or a newer stored value.
    pub fn restore_entry(&mut self, group: &SensorId, leaf: &SensorId, timestamp: i64, value: f64) -> bool {
        if !self.hierarchy.is_leaf_descendant(leaf.as_str(), group.as_str()) {
            return false;
        }
        let history = self
            .histories
            .entry(group.clone())
            .or_insert_with(|| AggregationHistory::new(group.clone()));
        history.set(leaf, timestamp, value) != Update::Late
    }

    /// Drops the histories of all groups matching `f`.
    pub fn drop_histories(&mut self, mut f: impl FnMut(&SensorId) -> bool) {
        self.histories.retain(|g, _| !f(g));
    }
}
