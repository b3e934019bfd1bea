//! Embedded partitioned message log.
//!
//! Topics are split into a fixed number of partitions. Messages are routed
//! by key (`partition_for`), so all messages with one key live in one
//! partition and keep their publish order. Consumers join groups; within a
//! group every partition is owned by exactly one member. Delivery is
//! at-least-once: a consumer commits the next offset it wants to read, and
//! anything after the last commit is redelivered after a crash or a
//! rebalance.
//!
//! With a log directory, each partition is backed by an append-only segment
//! file and committed offsets are stored next to it, so a restarted process
//! resumes where it left off.

mod group;
mod partitioner;
mod segment;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use group::assign_round_robin;
pub use partitioner::{fnv1a64, partition_for};

use group::{Group, Member};
use segment::Segment;

pub const RECORDS_TOPIC: &str = "records";
pub const GROUPED_RECORDS_TOPIC: &str = "grouped-records";
pub const AGGREGATED_RECORDS_TOPIC: &str = "aggregated-records";
pub const CONFIGURATION_TOPIC: &str = "configuration";

pub const LOG_DIR_ENV: &str = "WATTFLOW_LOG_DIR";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("topic {0:?} already exists")]
    TopicExists(String),
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("partition count must be at least 1")]
    InvalidPartitionCount,
    #[error("invalid topic name {0:?}")]
    InvalidTopicName(String),
    #[error("partition {0} does not exist")]
    UnknownPartition(TopicPartition),
    #[error("partition {0} is not owned by this consumer")]
    NotOwner(TopicPartition),
    #[error("consumer {0:?} is no longer a member of its group")]
    MemberGone(String),
    #[error("log storage error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt log metadata: {0}")]
    Metadata(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TopicPartition {
    pub topic: String,
    pub partition: u32,
}

impl TopicPartition {
    pub fn new(topic: impl Into<String>, partition: u32) -> Self {
        Self {
            topic: topic.into(),
            partition,
        }
    }
}

impl fmt::Display for TopicPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.topic, self.partition)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogMessage {
    pub topic: String,
    pub partition: u32,
    pub offset: u64,
    pub key: Arc<[u8]>,
    pub value: Arc<[u8]>,
}

impl LogMessage {
    pub fn topic_partition(&self) -> TopicPartition {
        TopicPartition::new(self.topic.clone(), self.partition)
    }
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// Members that have not polled for this long are removed from their group.
    pub session_timeout: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            session_timeout: Duration::from_secs(3),
        }
    }
}

struct Entry {
    key: Arc<[u8]>,
    value: Arc<[u8]>,
}

struct PartitionLog {
    base_offset: u64,
    entries: VecDeque<Entry>,
    segment: Option<Segment>,
}

impl PartitionLog {
    fn end_offset(&self) -> u64 {
        self.base_offset + self.entries.len() as u64
    }
}

struct Topic {
    name: String,
    partitions: Vec<Mutex<PartitionLog>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TopicMeta {
    name: String,
    partitions: u32,
    base_offsets: Vec<u64>,
}

/// Wake-up signal for blocked pollers: a sequence number bumped on every
/// publish and group change.
struct Signal {
    seq: Mutex<u64>,
    cond: Condvar,
}

impl Signal {
    fn current(&self) -> u64 {
        *self.seq.lock()
    }

    fn bump(&self) {
        *self.seq.lock() += 1;
        self.cond.notify_all();
    }

    fn wait_past(&self, seen: u64, timeout: Duration) {
        let mut seq = self.seq.lock();
        if *seq == seen {
            self.cond.wait_for(&mut seq, timeout);
        }
    }
}

/// In-process broker holding all topics and consumer groups.
pub struct Broker {
    dir: Option<PathBuf>,
    config: BrokerConfig,
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    groups: Mutex<HashMap<String, Arc<Mutex<Group>>>>,
    signal: Signal,
}

impl fmt::Debug for Broker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Broker").field("dir", &self.dir).finish_non_exhaustive()
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 200
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl Broker {
    pub fn in_memory() -> Arc<Self> {
        Self::with_config(BrokerConfig::default())
    }

    pub fn with_config(config: BrokerConfig) -> Arc<Self> {
        Arc::new(Self::new(None, config))
    }

    fn new(dir: Option<PathBuf>, config: BrokerConfig) -> Self {
        Self {
            dir,
            config,
            topics: RwLock::new(HashMap::new()),
            groups: Mutex::new(HashMap::new()),
            signal: Signal {
                seq: Mutex::new(0),
                cond: Condvar::new(),
            },
        }
    }

    /// Opens a durable log in `dir`, reloading all topics and committed offsets.
    pub fn open(dir: impl AsRef<Path>, config: BrokerConfig) -> Result<Arc<Self>, LogError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        fs::create_dir_all(dir.join("__offsets"))?;
        let broker = Self::new(Some(dir.clone()), config);
        {
            let mut topics = broker.topics.write();
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                let meta_path = path.join("topic.json");
                if !meta_path.is_file() {
                    continue;
                }
                let meta: TopicMeta = serde_json::from_slice(&fs::read(&meta_path)?)
                    .map_err(|e| LogError::Metadata(format!("{}: {e}", meta_path.display())))?;
                let mut partitions = Vec::with_capacity(meta.partitions as usize);
                for p in 0..meta.partitions {
                    let (segment, frames) = Segment::open(&path.join(format!("{p}.log")))?;
                    let entries = frames
                        .into_iter()
                        .map(|(k, v)| Entry {
                            key: k.into(),
                            value: v.into(),
                        })
                        .collect();
                    partitions.push(Mutex::new(PartitionLog {
                        base_offset: meta.base_offsets.get(p as usize).copied().unwrap_or(0),
                        entries,
                        segment: Some(segment),
                    }));
                }
                topics.insert(
                    meta.name.clone(),
                    Arc::new(Topic {
                        name: meta.name,
                        partitions,
                    }),
                );
            }
        }
        {
            let mut groups = broker.groups.lock();
            for entry in fs::read_dir(dir.join("__offsets"))? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let stored: StoredOffsets = serde_json::from_slice(&fs::read(&path)?)
                    .map_err(|e| LogError::Metadata(format!("{}: {e}", path.display())))?;
                let group = Group {
                    committed: stored
                        .offsets
                        .into_iter()
                        .map(|o| (TopicPartition::new(o.topic, o.partition), o.offset))
                        .collect(),
                    ..Group::default()
                };
                groups.insert(stored.group, Arc::new(Mutex::new(group)));
            }
        }
        Ok(Arc::new(broker))
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn create_topic(&self, name: &str, partitions: u32) -> Result<(), LogError> {
        if partitions < 1 {
            return Err(LogError::InvalidPartitionCount);
        }
        if !valid_name(name) || name.starts_with("__") {
            return Err(LogError::InvalidTopicName(name.to_string()));
        }
        let mut topics = self.topics.write();
        if topics.contains_key(name) {
            return Err(LogError::TopicExists(name.to_string()));
        }
        let mut logs = Vec::with_capacity(partitions as usize);
        if let Some(dir) = &self.dir {
            let tdir = dir.join(name);
            fs::create_dir_all(&tdir)?;
            for p in 0..partitions {
                let (segment, _) = Segment::open(&tdir.join(format!("{p}.log")))?;
                logs.push(Mutex::new(PartitionLog {
                    base_offset: 0,
                    entries: VecDeque::new(),
                    segment: Some(segment),
                }));
            }
            write_atomic(
                &tdir.join("topic.json"),
                &serde_json::to_vec_pretty(&TopicMeta {
                    name: name.to_string(),
                    partitions,
                    base_offsets: vec![0; partitions as usize],
                })
                .expect("topic metadata serializes"),
            )?;
        } else {
            for _ in 0..partitions {
                logs.push(Mutex::new(PartitionLog {
                    base_offset: 0,
                    entries: VecDeque::new(),
                    segment: None,
                }));
            }
        }
        topics.insert(
            name.to_string(),
            Arc::new(Topic {
                name: name.to_string(),
                partitions: logs,
            }),
        );
        Ok(())
    }

    /// Creates the topic unless it already exists with the same partition count.
    pub fn ensure_topic(&self, name: &str, partitions: u32) -> Result<(), LogError> {
        match self.partition_count(name) {
            Ok(n) if n == partitions => Ok(()),
            Ok(n) => Err(LogError::Metadata(format!(
                "topic {name:?} exists with {n} partitions, expected {partitions}"
            ))),
            Err(LogError::UnknownTopic(_)) => match self.create_topic(name, partitions) {
                Err(LogError::TopicExists(_)) => Ok(()),
                other => other,
            },
            Err(e) => Err(e),
        }
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>, LogError> {
        self.topics
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| LogError::UnknownTopic(name.to_string()))
    }

    pub fn topic_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.topics.read().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn partition_count(&self, topic: &str) -> Result<u32, LogError> {
        Ok(self.topic(topic)?.partitions.len() as u32)
    }

    /// Appends a message to the partition selected by its key.
    pub fn publish(&self, topic: &str, key: &[u8], value: &[u8]) -> Result<(u32, u64), LogError> {
        let t = self.topic(topic)?;
        let partition = partition_for(key, t.partitions.len() as u32);
        let offset = self.append(&t, partition, key, value)?;
        Ok((partition, offset))
    }

    /// Appends a message to an explicit partition, bypassing key routing.
    pub fn publish_to(&self, topic: &str, partition: u32, key: &[u8], value: &[u8]) -> Result<u64, LogError> {
        let t = self.topic(topic)?;
        if partition as usize >= t.partitions.len() {
            return Err(LogError::UnknownPartition(TopicPartition::new(topic, partition)));
        }
        self.append(&t, partition, key, value)
    }

    fn append(&self, t: &Topic, partition: u32, key: &[u8], value: &[u8]) -> Result<u64, LogError> {
        let offset = {
            let mut log = t.partitions[partition as usize].lock();
            if let Some(seg) = log.segment.as_mut() {
                seg.append(key, value)?;
            }
            let offset = log.end_offset();
            log.entries.push_back(Entry {
                key: key.into(),
                value: value.into(),
            });
            offset
        };
        self.signal.bump();
        Ok(offset)
    }

    /// Offset the next message of each partition will receive.
    pub fn end_offsets(&self, topic: &str) -> Result<Vec<u64>, LogError> {
        let t = self.topic(topic)?;
        Ok(t.partitions.iter().map(|p| p.lock().end_offset()).collect())
    }

    /// Reads up to `max` messages of one partition starting at `from`.
    pub fn read(&self, topic: &str, partition: u32, from: u64, max: usize) -> Result<Vec<LogMessage>, LogError> {
        let t = self.topic(topic)?;
        let log = t
            .partitions
            .get(partition as usize)
            .ok_or_else(|| LogError::UnknownPartition(TopicPartition::new(topic, partition)))?
            .lock();
        Ok(read_from(&t.name, partition, &log, from, max))
    }

    /// Drops every message of a partition below `offset`.
    pub fn truncate_before(&self, topic: &str, partition: u32, offset: u64) -> Result<(), LogError> {
        let t = self.topic(topic)?;
        let slot = t
            .partitions
            .get(partition as usize)
            .ok_or_else(|| LogError::UnknownPartition(TopicPartition::new(topic, partition)))?;
        let mut log = slot.lock();
        let cut = offset.clamp(log.base_offset, log.end_offset());
        let drop_n = (cut - log.base_offset) as usize;
        log.entries.drain(..drop_n);
        log.base_offset = cut;
        let PartitionLog {
            entries, segment, ..
        } = &mut *log;
        if let Some(seg) = segment.as_mut() {
            seg.rewrite(entries.iter().map(|e| (&e.key[..], &e.value[..])))?;
        }
        drop(log);
        if let Some(dir) = &self.dir {
            let base_offsets = t.partitions.iter().map(|p| p.lock().base_offset).collect();
            write_atomic(
                &dir.join(&t.name).join("topic.json"),
                &serde_json::to_vec_pretty(&TopicMeta {
                    name: t.name.clone(),
                    partitions: t.partitions.len() as u32,
                    base_offsets,
                })
                .expect("topic metadata serializes"),
            )?;
        }
        Ok(())
    }

    fn group(&self, group_id: &str) -> Arc<Mutex<Group>> {
        self.groups
            .lock()
            .entry(group_id.to_string())
            .or_default()
            .clone()
    }

    fn all_partitions(&self, topics: &BTreeSet<String>) -> Vec<TopicPartition> {
        let registry = self.topics.read();
        topics
            .iter()
            .filter_map(|t| registry.get(t))
            .flat_map(|t| (0..t.partitions.len() as u32).map(move |p| TopicPartition::new(t.name.clone(), p)))
            .collect()
    }

    /// Joins `group_id` with an auto-generated member name.
    pub fn subscribe(self: &Arc<Self>, group_id: &str, topics: &[&str]) -> Result<Consumer, LogError> {
        self.subscribe_as(group_id, "member", topics)
    }

    /// Joins `group_id`; the member name is `<client_id>-<sequence>`.
    pub fn subscribe_as(self: &Arc<Self>, group_id: &str, client_id: &str, topics: &[&str]) -> Result<Consumer, LogError> {
        for t in topics {
            self.topic(t)?;
        }
        let topics: BTreeSet<String> = topics.iter().map(|s| s.to_string()).collect();
        let group = self.group(group_id);
        let member_id = {
            let mut g = group.lock();
            let now = Instant::now();
            g.expire(now, self.config.session_timeout);
            let member_id = format!("{client_id}-{:06}", g.next_member_seq);
            g.next_member_seq += 1;
            g.members.insert(
                member_id.clone(),
                Member {
                    topics: topics.clone(),
                    last_seen: now,
                },
            );
            let all = self.all_partitions(&g.topics());
            g.rebalance(&all);
            member_id
        };
        self.signal.bump();
        let mut consumer = Consumer {
            broker: Arc::clone(self),
            group_id: group_id.to_string(),
            group,
            member_id,
            topics,
            assignment: BTreeSet::new(),
            positions: HashMap::new(),
            cursor: 0,
            state: ConsumerState::Active,
        };
        consumer.sync()?;
        Ok(consumer)
    }

    /// Current owner of each partition in a group.
    pub fn group_ownership(&self, group_id: &str) -> BTreeMap<TopicPartition, String> {
        self.groups
            .lock()
            .get(group_id)
            .map(|g| g.lock().owned.clone())
            .unwrap_or_default()
    }

    pub fn group_members(&self, group_id: &str) -> Vec<String> {
        self.groups
            .lock()
            .get(group_id)
            .map(|g| g.lock().members.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn committed_offset(&self, group_id: &str, tp: &TopicPartition) -> Option<u64> {
        self.groups
            .lock()
            .get(group_id)
            .and_then(|g| g.lock().committed.get(tp).copied())
    }

    /// Messages not yet committed by `group_id` across `topics`.
    pub fn group_lag(&self, group_id: &str, topics: &[&str]) -> Result<u64, LogError> {
        let group = self.groups.lock().get(group_id).cloned();
        let mut lag = 0;
        for topic in topics {
            for (p, end) in self.end_offsets(topic)?.into_iter().enumerate() {
                let tp = TopicPartition::new(*topic, p as u32);
                let committed = group
                    .as_ref()
                    .and_then(|g| g.lock().committed.get(&tp).copied())
                    .unwrap_or(0);
                lag += end.saturating_sub(committed);
            }
        }
        Ok(lag)
    }

    /// Reader over every partition of `topic` that is not part of any group.
    pub fn reader(self: &Arc<Self>, topic: &str) -> Result<TopicReader, LogError> {
        let n = self.partition_count(topic)?;
        Ok(TopicReader {
            broker: Arc::clone(self),
            topic: topic.to_string(),
            positions: vec![0; n as usize],
        })
    }

    fn persist_offsets(&self, group_id: &str, group: &Group) -> Result<(), LogError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let mut offsets: Vec<StoredOffset> = group
            .committed
            .iter()
            .map(|(tp, &offset)| StoredOffset {
                topic: tp.topic.clone(),
                partition: tp.partition,
                offset,
            })
            .collect();
        offsets.sort_by(|a, b| (&a.topic, a.partition).cmp(&(&b.topic, b.partition)));
        let stored = StoredOffsets {
            group: group_id.to_string(),
            offsets,
        };
        let file = format!("{}.json", hex_name(group_id));
        write_atomic(
            &dir.join("__offsets").join(file),
            &serde_json::to_vec(&stored).expect("offsets serialize"),
        )?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StoredOffsets {
    group: String,
    offsets: Vec<StoredOffset>,
}

#[derive(Serialize, Deserialize)]
struct StoredOffset {
    topic: String,
    partition: u32,
    offset: u64,
}

fn hex_name(s: &str) -> String {
    s.bytes().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn read_from(topic: &str, partition: u32, log: &PartitionLog, from: u64, max: usize) -> Vec<LogMessage> {
    let start = from.max(log.base_offset);
    let idx = (start - log.base_offset) as usize;
    log.entries
        .iter()
        .skip(idx)
        .take(max)
        .enumerate()
        .map(|(i, e)| LogMessage {
            topic: topic.to_string(),
            partition,
            offset: start + i as u64,
            key: Arc::clone(&e.key),
            value: Arc::clone(&e.value),
        })
        .collect()
}

/// Partitions taken from and handed to a consumer by a rebalance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RebalanceEvent {
    pub revoked: Vec<TopicPartition>,
    pub assigned: Vec<TopicPartition>,
}

#[derive(Debug)]
pub enum PollOutcome {
    Messages(Vec<LogMessage>),
    /// The assignment changed since the previous poll. Positions of newly
    /// assigned partitions start at the group's committed offsets.
    Rebalanced(RebalanceEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConsumerState {
    Active,
    Left,
}

/// One member of a consumer group. Not shareable across threads without
/// external serialization.
pub struct Consumer {
    broker: Arc<Broker>,
    group_id: String,
    group: Arc<Mutex<Group>>,
    member_id: String,
    topics: BTreeSet<String>,
    assignment: BTreeSet<TopicPartition>,
    positions: HashMap<TopicPartition, u64>,
    cursor: usize,
    state: ConsumerState,
}

impl fmt::Debug for Consumer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Consumer")
            .field("group_id", &self.group_id)
            .field("member_id", &self.member_id)
            .field("assignment", &self.assignment)
            .finish_non_exhaustive()
    }
}

impl Consumer {
    pub fn member_id(&self) -> &str {
        &self.member_id
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn assignment(&self) -> &BTreeSet<TopicPartition> {
        &self.assignment
    }

    pub fn position(&self, tp: &TopicPartition) -> Option<u64> {
        self.positions.get(tp).copied()
    }

    /// Heartbeat and ownership hand-over. Returns the rebalance event if the
    /// owned set changed.
    fn sync(&mut self) -> Result<Option<RebalanceEvent>, LogError> {
        let (owned, newly_assigned, others_affected) = {
            let mut g = self.group.lock();
            let now = Instant::now();
            let mut affected = false;
            if g.expire(now, self.broker.config.session_timeout) {
                let all = self.broker.all_partitions(&g.topics());
                g.rebalance(&all);
                affected = true;
            }
            let before = g.owned.clone();
            let owned = g
                .sync(&self.member_id, now)
                .ok_or_else(|| LogError::MemberGone(self.member_id.clone()))?;
            // Released partitions may unblock other members.
            affected |= before.len() > g.owned.len() || before.keys().any(|tp| !g.owned.contains_key(tp));
            let newly_assigned: Vec<(TopicPartition, u64)> = owned
                .difference(&self.assignment)
                .map(|tp| (tp.clone(), g.committed.get(tp).copied().unwrap_or(0)))
                .collect();
            (owned, newly_assigned, affected)
        };
        if others_affected {
            self.broker.signal.bump();
        }
        if owned == self.assignment {
            return Ok(None);
        }
        let revoked: Vec<TopicPartition> = self.assignment.difference(&owned).cloned().collect();
        for tp in &revoked {
            self.positions.remove(tp);
        }
        let mut assigned = Vec::with_capacity(newly_assigned.len());
        for (tp, offset) in newly_assigned {
            self.positions.insert(tp.clone(), offset);
            assigned.push(tp);
        }
        self.assignment = owned;
        Ok(Some(RebalanceEvent { revoked, assigned }))
    }

    /// Non-blocking poll.
    pub fn poll(&mut self, max: usize) -> Result<PollOutcome, LogError> {
        self.poll_timeout(max, Duration::ZERO)
    }

    /// Returns up to `max` messages from owned partitions, waiting at most
    /// `timeout` for data to arrive.
    pub fn poll_timeout(&mut self, max: usize, timeout: Duration) -> Result<PollOutcome, LogError> {
        if self.state != ConsumerState::Active {
            return Err(LogError::MemberGone(self.member_id.clone()));
        }
        let deadline = Instant::now() + timeout;
        loop {
            let seen = self.broker.signal.current();
            if let Some(event) = self.sync()? {
                return Ok(PollOutcome::Rebalanced(event));
            }
            let msgs = self.fetch(max)?;
            let now = Instant::now();
            if !msgs.is_empty() || now >= deadline {
                return Ok(PollOutcome::Messages(msgs));
            }
            // Wake up regularly so heartbeats keep flowing while idle.
            let wait = (deadline - now).min(Duration::from_millis(100));
            self.broker.signal.wait_past(seen, wait);
        }
    }

    fn fetch(&mut self, max: usize) -> Result<Vec<LogMessage>, LogError> {
        if self.assignment.is_empty() || max == 0 {
            return Ok(Vec::new());
        }
        let owned: Vec<TopicPartition> = self.assignment.iter().cloned().collect();
        let n = owned.len();
        self.cursor = (self.cursor + 1) % n;
        let quota = max.div_ceil(n).max(1);
        let mut out = Vec::new();
        // First pass spreads the batch across partitions, second fills it up.
        for pass_quota in [quota, max] {
            for i in 0..n {
                if out.len() >= max {
                    break;
                }
                let tp = &owned[(self.cursor + i) % n];
                let topic = self.broker.topic(&tp.topic)?;
                let pos = self.positions.get(tp).copied().unwrap_or(0);
                let take = pass_quota.min(max - out.len());
                let batch = {
                    let log = topic.partitions[tp.partition as usize].lock();
                    read_from(&topic.name, tp.partition, &log, pos, take)
                };
                if let Some(last) = batch.last() {
                    self.positions.insert(tp.clone(), last.offset + 1);
                }
                out.extend(batch);
            }
        }
        Ok(out)
    }

    /// Commits `offsets` (next offset to read, per partition). Fails without
    /// committing anything if one of them is not owned by this consumer.
    pub fn commit(&mut self, offsets: &BTreeMap<TopicPartition, u64>) -> Result<(), LogError> {
        if self.state != ConsumerState::Active {
            return Err(LogError::MemberGone(self.member_id.clone()));
        }
        let mut g = self.group.lock();
        match g.members.get_mut(&self.member_id) {
            Some(m) => m.last_seen = Instant::now(),
            None => return Err(LogError::MemberGone(self.member_id.clone())),
        }
        for tp in offsets.keys() {
            if g.owned.get(tp) != Some(&self.member_id) {
                return Err(LogError::NotOwner(tp.clone()));
            }
        }
        for (tp, &offset) in offsets {
            g.committed.insert(tp.clone(), offset);
        }
        self.broker.persist_offsets(&self.group_id, &g)
    }

    /// Commits the current position of every partition this consumer still
    /// owns. Returns the partitions that were skipped because ownership moved.
    pub fn commit_positions(&mut self) -> Result<Vec<TopicPartition>, LogError> {
        let owned_now: BTreeSet<TopicPartition> = {
            let g = self.group.lock();
            g.owned
                .iter()
                .filter(|(_, o)| **o == self.member_id)
                .map(|(tp, _)| tp.clone())
                .collect()
        };
        let mut offsets = BTreeMap::new();
        let mut skipped = Vec::new();
        for (tp, &pos) in &self.positions {
            if owned_now.contains(tp) {
                offsets.insert(tp.clone(), pos);
            } else {
                skipped.push(tp.clone());
            }
        }
        match self.commit(&offsets) {
            Ok(()) => Ok(skipped),
            // Lost a partition between the snapshot and the commit.
            Err(LogError::NotOwner(tp)) => {
                skipped.push(tp);
                Ok(skipped)
            }
            Err(e) => Err(e),
        }
    }

    /// Leaves the group; its partitions are reassigned to the remaining members.
    pub fn leave(mut self) {
        self.leave_inner();
    }

    fn leave_inner(&mut self) {
        if self.state != ConsumerState::Active {
            return;
        }
        self.state = ConsumerState::Left;
        {
            let mut g = self.group.lock();
            if g.members.remove(&self.member_id).is_some() {
                let all = self.broker.all_partitions(&g.topics());
                g.rebalance(&all);
            }
        }
        self.broker.signal.bump();
    }

    /// Abandons the consumer without leaving, as a crashed process would.
    /// The group notices once the session timeout expires.
    pub fn crash(mut self) {
        self.state = ConsumerState::Left;
    }

    /// Rejoins the group under a fresh member id with the same subscription,
    /// e.g. after the session expired.
    pub fn rejoin(&mut self, client_id: &str) -> Result<RebalanceEvent, LogError> {
        let revoked: Vec<TopicPartition> = self.assignment.iter().cloned().collect();
        self.leave_inner();
        let topics: Vec<&str> = self.topics.iter().map(String::as_str).collect();
        let fresh = self.broker.subscribe_as(&self.group_id, client_id, &topics)?;
        let assigned = fresh.assignment.iter().cloned().collect();
        let old = std::mem::replace(self, fresh);
        // `old` has already left.
        drop(old);
        Ok(RebalanceEvent { revoked, assigned })
    }
}

impl Drop for Consumer {
    fn drop(&mut self) {
        self.leave_inner();
    }
}

/// Groupless sequential reader over all partitions of a topic.
pub struct TopicReader {
    broker: Arc<Broker>,
    topic: String,
    positions: Vec<u64>,
}

impl TopicReader {
    /// Moves every position to the current end of the topic.
    pub fn seek_to_end(&mut self) -> Result<(), LogError> {
        self.positions = self.broker.end_offsets(&self.topic)?;
        Ok(())
    }

    pub fn poll(&mut self, max: usize) -> Result<Vec<LogMessage>, LogError> {
        let mut out = Vec::new();
        for p in 0..self.positions.len() {
            if out.len() >= max {
                break;
            }
            let batch = self
                .broker
                .read(&self.topic, p as u32, self.positions[p], max - out.len())?;
            if let Some(last) = batch.last() {
                self.positions[p] = last.offset + 1;
            }
            out.extend(batch);
        }
        Ok(out)
    }

    /// Reads everything currently in the topic past the reader's positions.
    pub fn drain(&mut self) -> Result<Vec<LogMessage>, LogError> {
        let mut out = Vec::new();
        loop {
            let batch = self.poll(4096)?;
            if batch.is_empty() {
                return Ok(out);
            }
            out.extend(batch);
        }
    }
}
