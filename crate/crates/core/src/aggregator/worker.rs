use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Metrics, MetricsSnapshot, WorkerState};
use crate::history::{RecordSink, StoreError};
use crate::msglog::{
    partition_for, Broker, Consumer, LogError, LogMessage, PollOutcome, RebalanceEvent, TopicPartition,
    AGGREGATED_RECORDS_TOPIC, CONFIGURATION_TOPIC, GROUPED_RECORDS_TOPIC, RECORDS_TOPIC,
};
use crate::records::{decode_active_power, encode_active_power, encode_aggregated, Record, RecordError, SensorId};
use crate::registry::{ConfigurationEvent, SensorHierarchy};

pub const AGGREGATOR_GROUP: &str = "aggregator";

/// Backup of the aggregation histories. Entries for a group are written to
/// the partition index of that group's `grouped-records` partition, so a
/// worker that takes over a partition can rebuild its histories.
pub const CHANGELOG_TOPIC: &str = "aggregation-histories";

const COMPACT_MIN_ENTRIES: u64 = 20_000;

#[derive(Debug, Error)]
pub enum AggregatorError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("history store: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("worker thread panicked")]
    Panicked,
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub instance_id: String,
    /// Partition count used when the worker has to create its topics.
    pub partitions: u32,
    pub max_poll_records: usize,
    pub poll_timeout: Duration,
}

impl WorkerConfig {
    pub fn new(instance_id: impl Into<String>) -> Self {
        Self {
            instance_id: instance_id.into(),
            ..Self::default()
        }
    }
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            instance_id: "aggregator".into(),
            partitions: 8,
            max_poll_records: 500,
            poll_timeout: Duration::from_millis(100),
        }
    }
}

/// One entry of the history changelog: a leaf value, or its removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChangelogEntry {
    pub group: SensorId,
    pub leaf: SensorId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_in_w: Option<f64>,
}

impl ChangelogEntry {
    fn value(group: &SensorId, leaf: &SensorId, timestamp: i64, value: f64) -> Self {
        Self {
            group: group.clone(),
            leaf: leaf.clone(),
            timestamp: Some(timestamp),
            value_in_w: Some(value),
        }
    }

    fn tombstone(group: SensorId, leaf: SensorId) -> Self {
        Self {
            group,
            leaf,
            timestamp: None,
            value_in_w: None,
        }
    }
}

#[derive(Default)]
struct Shared {
    member_id: Option<String>,
    hierarchy_version: u64,
}

/// A running aggregator worker.
pub struct WorkerHandle {
    instance_id: String,
    stop: Arc<AtomicBool>,
    kill: Arc<AtomicBool>,
    metrics: Arc<Metrics>,
    shared: Arc<Mutex<Shared>>,
    thread: Option<JoinHandle<Result<(), AggregatorError>>>,
}

impl WorkerHandle {
    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    pub fn metrics_handle(&self) -> Arc<Metrics> {
        Arc::clone(&self.metrics)
    }

    /// Current consumer group member id, once joined.
    pub fn member_id(&self) -> Option<String> {
        self.shared.lock().member_id.clone()
    }

    pub fn hierarchy_version(&self) -> u64 {
        self.shared.lock().hierarchy_version
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(JoinHandle::is_finished)
    }

    /// Finishes the current batch, commits and leaves the group.
    pub fn stop(mut self) -> Result<(), AggregatorError> {
        self.stop.store(true, Ordering::Relaxed);
        self.join()
    }

    /// Terminates the worker as a crash would: no commit of the batch in
    /// flight and no leave, so the group only notices once the session
    /// times out.
    pub fn kill(mut self) {
        self.kill.store(true, Ordering::Relaxed);
        let _ = self.join();
    }

    fn join(&mut self) -> Result<(), AggregatorError> {
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| AggregatorError::Panicked)?,
            None => Ok(()),
        }
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.join();
    }
}

/// Starts a worker thread in consumer group `aggregator`. Raw records and
/// aggregates are written to `sink` before the consumed offsets are
/// committed.
pub fn run_worker(broker: Arc<Broker>, sink: Arc<dyn RecordSink>, config: WorkerConfig) -> Result<WorkerHandle, AggregatorError> {
    for topic in [RECORDS_TOPIC, GROUPED_RECORDS_TOPIC, AGGREGATED_RECORDS_TOPIC] {
        ensure_exists(&broker, topic, config.partitions)?;
    }
    let grouped_partitions = broker.partition_count(GROUPED_RECORDS_TOPIC)?;
    ensure_exists(&broker, CHANGELOG_TOPIC, grouped_partitions)?;
    ensure_exists(&broker, CONFIGURATION_TOPIC, 1)?;

    let metrics = Arc::new(Metrics::default());
    let stop = Arc::new(AtomicBool::new(false));
    let kill = Arc::new(AtomicBool::new(false));
    let shared = Arc::new(Mutex::new(Shared::default()));

    let mut config_reader = broker.reader(CONFIGURATION_TOPIC)?;
    let hierarchy = config_reader
        .drain()?
        .iter()
        .filter_map(|m| ConfigurationEvent::decode(&m.value).ok())
        .max_by_key(|e| e.version)
        .map(|e| e.full_hierarchy)
        .unwrap_or_else(SensorHierarchy::initial);
    let consumer = broker.subscribe_as(AGGREGATOR_GROUP, &config.instance_id, &[RECORDS_TOPIC, GROUPED_RECORDS_TOPIC])?;
    {
        let mut s = shared.lock();
        s.member_id = Some(consumer.member_id().to_string());
        s.hierarchy_version = hierarchy.version();
    }
    let mut worker = Worker {
        state: WorkerState::new(Arc::new(hierarchy), Arc::clone(&metrics)),
        grouped_partitions,
        changelog_appends: HashMap::new(),
        broker,
        sink,
        consumer,
        config_reader,
        shared: Arc::clone(&shared),
        stop: Arc::clone(&stop),
        kill: Arc::clone(&kill),
        config: config.clone(),
    };
    let thread = thread::Builder::new()
        .name(format!("aggregator-{}", config.instance_id))
        .spawn(move || {
            let result = worker.run();
            if let Err(e) = &result {
                tracing::error!(instance = %worker.config.instance_id, error = %e, "aggregator worker failed");
            }
            worker.finish();
            result
        })
        .expect("spawn aggregator thread");
    tracing::info!(instance = %config.instance_id, "aggregator worker started");
    Ok(WorkerHandle {
        instance_id: config.instance_id,
        stop,
        kill,
        metrics,
        shared,
        thread: Some(thread),
    })
}

/// Creates `topic` unless it exists, in which case its layout is kept.
fn ensure_exists(broker: &Broker, topic: &str, partitions: u32) -> Result<(), LogError> {
    match broker.partition_count(topic) {
        Ok(_) => Ok(()),
        Err(LogError::UnknownTopic(_)) => broker.ensure_topic(topic, partitions),
        Err(e) => Err(e),
    }
}

struct Worker {
    state: WorkerState,
    grouped_partitions: u32,
    changelog_appends: HashMap<u32, u64>,
    broker: Arc<Broker>,
    sink: Arc<dyn RecordSink>,
    consumer: Consumer,
    config_reader: crate::msglog::TopicReader,
    shared: Arc<Mutex<Shared>>,
    stop: Arc<AtomicBool>,
    kill: Arc<AtomicBool>,
    config: WorkerConfig,
}

enum Flow {
    Continue,
    Killed,
}

impl Worker {
    fn killed(&self) -> bool {
        self.kill.load(Ordering::Relaxed)
    }

    fn run(&mut self) -> Result<(), AggregatorError> {
        // Partitions handed out at subscribe time arrive without an event.
        let initial = RebalanceEvent {
            revoked: Vec::new(),
            assigned: self.consumer.assignment().iter().cloned().collect(),
        };
        self.on_rebalance(&initial)?;
        while !self.stop.load(Ordering::Relaxed) && !self.killed() {
            self.apply_config_events()?;
            match self
                .consumer
                .poll_timeout(self.config.max_poll_records, self.config.poll_timeout)
            {
                Ok(PollOutcome::Rebalanced(event)) => self.on_rebalance(&event)?,
                Ok(PollOutcome::Messages(msgs)) if msgs.is_empty() => {}
                Ok(PollOutcome::Messages(msgs)) => {
                    // A hierarchy published while we were blocked precedes these records.
                    self.apply_config_events()?;
                    if let Flow::Killed = self.process_batch(&msgs)? {
                        return Ok(());
                    }
                    match self.consumer.commit_positions() {
                        Ok(_) => self.maybe_compact()?,
                        Err(LogError::MemberGone(_)) => self.rejoin()?,
                        Err(e) => return Err(e.into()),
                    }
                }
                Err(LogError::MemberGone(_)) => self.rejoin()?,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn finish(self) {
        if self.killed() {
            self.consumer.crash();
        } else {
            self.consumer.leave();
        }
    }

    fn rejoin(&mut self) -> Result<(), AggregatorError> {
        tracing::warn!(instance = %self.config.instance_id, "session expired, rejoining");
        let event = self.consumer.rejoin(&self.config.instance_id)?;
        self.shared.lock().member_id = Some(self.consumer.member_id().to_string());
        self.on_rebalance(&event)
    }

    fn group_partition(&self, group: &SensorId) -> u32 {
        partition_for(group.as_bytes(), self.grouped_partitions)
    }

    fn apply_config_events(&mut self) -> Result<(), AggregatorError> {
        for msg in self.config_reader.poll(64)? {
            let event = match ConfigurationEvent::decode(&msg.value) {
                Ok(e) => e,
                Err(e) => {
                    tracing::warn!(error = %e, "unreadable configuration event");
                    continue;
                }
            };
            let Some(removed) = self.state.apply_config_event(&event) else { continue };
            tracing::info!(version = event.version, pruned = removed.len(), "hierarchy updated");
            self.shared.lock().hierarchy_version = event.version;
            for (group, leaf) in removed {
                let p = self.group_partition(&group);
                self.write_changelog(p, &ChangelogEntry::tombstone(group, leaf))?;
            }
        }
        Ok(())
    }

    fn on_rebalance(&mut self, event: &RebalanceEvent) -> Result<(), AggregatorError> {
        let grouped = |tps: &[TopicPartition]| -> Vec<u32> {
            tps.iter()
                .filter(|tp| tp.topic == GROUPED_RECORDS_TOPIC)
                .map(|tp| tp.partition)
                .collect()
        };
        let revoked = grouped(&event.revoked);
        if !revoked.is_empty() {
            let n = self.grouped_partitions;
            self.state
                .drop_histories(|g| revoked.contains(&partition_for(g.as_bytes(), n)));
            for p in &revoked {
                self.changelog_appends.remove(p);
            }
        }
        for p in grouped(&event.assigned) {
            self.restore(p)?;
        }
        tracing::debug!(
            instance = %self.config.instance_id,
            revoked = event.revoked.len(),
            assigned = event.assigned.len(),
            "rebalanced"
        );
        Ok(())
    }

    /// Rebuilds the histories of the groups on grouped partition `p`.
    fn restore(&mut self, p: u32) -> Result<(), AggregatorError> {
        let mut latest: HashMap<(SensorId, SensorId), Option<(i64, f64)>> = HashMap::new();
        let mut from = 0;
        let mut entries = 0u64;
        loop {
            let batch = self.broker.read(CHANGELOG_TOPIC, p, from, 8192)?;
            let Some(last) = batch.last() else { break };
            from = last.offset + 1;
            entries += batch.len() as u64;
            for m in &batch {
                let Ok(e) = serde_json::from_slice::<ChangelogEntry>(&m.value) else { continue };
                let value = e.timestamp.zip(e.value_in_w);
                latest.insert((e.group, e.leaf), value);
            }
        }
        let mut live = 0u64;
        for ((group, leaf), value) in latest {
            if let Some((ts, v)) = value {
                if self.state.restore_entry(&group, &leaf, ts, v) {
                    live += 1;
                }
            }
        }
        self.changelog_appends.insert(p, entries);
        if entries > COMPACT_MIN_ENTRIES && entries > 4 * live {
            self.compact(p)?;
        }
        Ok(())
    }

    fn write_changelog(&mut self, p: u32, entry: &ChangelogEntry) -> Result<(), AggregatorError> {
        let bytes = serde_json::to_vec(entry).expect("changelog entry serializes");
        self.broker
            .publish_to(CHANGELOG_TOPIC, p, entry.group.as_bytes(), &bytes)?;
        *self.changelog_appends.entry(p).or_default() += 1;
        Ok(())
    }

    /// Replaces the changelog of partition `p` by a snapshot of the live
    /// histories.
    fn compact(&mut self, p: u32) -> Result<(), AggregatorError> {
        let start = self.broker.end_offsets(CHANGELOG_TOPIC)?[p as usize];
        let snapshot: Vec<ChangelogEntry> = self
            .state
            .histories()
            .filter(|h| self.group_partition(h.aggregated_sensor()) == p)
            .flat_map(|h| {
                h.last_values()
                    .iter()
                    .map(|(leaf, (ts, v))| ChangelogEntry::value(h.aggregated_sensor(), leaf, *ts, *v))
            })
            .collect();
        for e in &snapshot {
            self.write_changelog(p, e)?;
        }
        self.broker.truncate_before(CHANGELOG_TOPIC, p, start)?;
        self.changelog_appends.insert(p, snapshot.len() as u64);
        Ok(())
    }

    fn maybe_compact(&mut self) -> Result<(), AggregatorError> {
        let mut live: HashMap<u32, u64> = HashMap::new();
        let due: Vec<u32> = self
            .changelog_appends
            .iter()
            .filter(|(_, n)| **n > COMPACT_MIN_ENTRIES)
            .map(|(p, _)| *p)
            .collect();
        if due.is_empty() {
            return Ok(());
        }
        for h in self.state.histories() {
            *live.entry(self.group_partition(h.aggregated_sensor())).or_default() += h.len() as u64;
        }
        for p in due {
            if self.changelog_appends[&p] > 4 * live.get(&p).copied().unwrap_or(0) {
                self.compact(p)?;
            }
        }
        Ok(())
    }

    fn process_batch(&mut self, msgs: &[LogMessage]) -> Result<Flow, AggregatorError> {
        let mut stored = Vec::with_capacity(msgs.len());
        for m in msgs {
            if self.killed() {
                return Ok(Flow::Killed);
            }
            match m.topic.as_str() {
                RECORDS_TOPIC => self.process_raw(m, &mut stored)?,
                GROUPED_RECORDS_TOPIC => self.process_grouped(m, &mut stored)?,
                _ => {}
            }
        }
        if self.killed() {
            return Ok(Flow::Killed);
        }
        self.sink.append_batch(&stored)?;
        self.sink.sync()?;
        if self.killed() {
            return Ok(Flow::Killed);
        }
        Ok(Flow::Continue)
    }

    fn process_raw(&mut self, m: &LogMessage, stored: &mut Vec<Record>) -> Result<(), AggregatorError> {
        let record = match decode_active_power(&m.value) {
            Ok(r) => r,
            Err(e) => {
                Metrics::inc(&self.state.metrics().malformed_messages);
                tracing::warn!(topic = %m.topic, partition = m.partition, offset = m.offset, error = %e, "skipping malformed record");
                return Ok(());
            }
        };
        let value = encode_active_power(&record)?;
        for (group, _) in self.state.fan_out(&record) {
            self.broker
                .publish(GROUPED_RECORDS_TOPIC, group.as_bytes(), &value)?;
        }
        stored.push(Record::ActivePower(record));
        Ok(())
    }

    fn process_grouped(&mut self, m: &LogMessage, stored: &mut Vec<Record>) -> Result<(), AggregatorError> {
        let group = std::str::from_utf8(&m.key).ok().and_then(|k| SensorId::new(k).ok());
        let (Some(group), Ok(record)) = (group, decode_active_power(&m.value)) else {
            Metrics::inc(&self.state.metrics().malformed_messages);
            tracing::warn!(topic = %m.topic, partition = m.partition, offset = m.offset, "skipping malformed grouped record");
            return Ok(());
        };
        let Some(aggregate) = self.state.process_grouped(&group, &record) else {
            return Ok(());
        };
        let entry = ChangelogEntry::value(&group, &record.identifier, record.timestamp, record.value_in_w);
        self.write_changelog(m.partition, &entry)?;
        self.broker
            .publish(AGGREGATED_RECORDS_TOPIC, group.as_bytes(), &encode_aggregated(&aggregate)?)?;
        stored.push(Record::Aggregated(aggregate));
        Ok(())
    }
}
