//! Time-series persistence for raw and aggregated records.
//!
//! Records are kept per sensor in timestamp order and upserted by
//! `(identifier, timestamp)`, so redelivered records never duplicate rows.
//! With a data directory, every append also goes to a write-ahead log that
//! is replayed on open.

mod query;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::ops::Bound;
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

pub use query::{Bucket, QueryError, Share, StatsSummary};

use crate::msglog::fnv1a64;
use crate::records::{decode_record, encode_record, Record, RecordError, SensorId};

const SHARDS: usize = 16;
const WAL_FILE: &str = "history.wal";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("history storage: {0}")]
    Io(#[from] io::Error),
}

/// Destination for records leaving the aggregation pipeline.
pub trait RecordSink: Send + Sync {
    fn append_batch(&self, records: &[Record]) -> Result<(), StoreError>;

    /// Makes every appended record durable.
    fn sync(&self) -> Result<(), StoreError> {
        Ok(())
    }
}

type Series = BTreeMap<i64, Record>;

pub struct SeriesStore {
    shards: Vec<RwLock<HashMap<SensorId, Series>>>,
    wal: Option<Mutex<BufWriter<File>>>,
    dir: Option<PathBuf>,
}

impl std::fmt::Debug for SeriesStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeriesStore").field("dir", &self.dir).finish_non_exhaustive()
    }
}

impl Default for SeriesStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl SeriesStore {
    pub fn in_memory() -> Self {
        Self {
            shards: (0..SHARDS).map(|_| RwLock::new(HashMap::new())).collect(),
            wal: None,
            dir: None,
        }
    }

    /// Opens a durable store in `dir`, replaying its write-ahead log.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let path = dir.join(WAL_FILE);
        let mut store = Self::in_memory();
        let mut valid_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(&path)?);
            let mut line = Vec::new();
            loop {
                line.clear();
                let n = reader.read_until(b'\n', &mut line)?;
                if n == 0 || line.last() != Some(&b'\n') {
                    break;
                }
                match decode_record(&line[..n - 1]) {
                    Ok(r) => store.insert(r),
                    Err(_) => break,
                }
                valid_len += n as u64;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() != valid_len {
            file.set_len(valid_len)?;
        }
        store.wal = Some(Mutex::new(BufWriter::new(file)));
        store.dir = Some(dir);
        Ok(store)
    }

    fn shard(&self, id: &str) -> &RwLock<HashMap<SensorId, Series>> {
        &self.shards[(fnv1a64(id.as_bytes()) % SHARDS as u64) as usize]
    }

    fn insert(&self, record: Record) {
        let id = record.identifier().clone();
        let ts = record.timestamp();
        self.shard(id.as_str())
            .write()
            .entry(id)
            .or_default()
            .insert(ts, record);
    }

    /// Stores a record, replacing any record with the same identifier and
    /// timestamp.
    pub fn append(&self, record: Record) -> Result<(), StoreError> {
        self.append_batch(std::slice::from_ref(&record))
    }

    pub fn len(&self) -> usize {
        self.shards
            .iter()
            .map(|s| s.read().values().map(BTreeMap::len).sum::<usize>())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sensors(&self) -> Vec<SensorId> {
        let mut ids: Vec<SensorId> = self
            .shards
            .iter()
            .flat_map(|s| s.read().keys().cloned().collect::<Vec<_>>())
            .collect();
        ids.sort();
        ids
    }

    pub fn get(&self, id: &str, timestamp: i64) -> Option<Record> {
        self.shard(id).read().get(id)?.get(&timestamp).cloned()
    }

    /// Most recent record of `id`.
    pub fn latest(&self, id: &str) -> Option<Record> {
        self.shard(id)
            .read()
            .get(id)?
            .last_key_value()
            .map(|(_, r)| r.clone())
    }

    /// Most recent record of `id` with timestamp ≤ `at`.
    pub fn latest_at_or_before(&self, id: &str, at: i64) -> Option<Record> {
        self.shard(id)
            .read()
            .get(id)?
            .range(..=at)
            .next_back()
            .map(|(_, r)| r.clone())
    }

    /// Applies `f` to the records of `id` with `from <= timestamp < to`, in
    /// timestamp order, under one consistent read.
    pub(crate) fn scan<T>(&self, id: &str, from: i64, to: i64, f: impl FnOnce(&mut dyn Iterator<Item = &Record>) -> T) -> T {
        let shard = self.shard(id).read();
        match shard.get(id) {
            Some(series) if from < to => {
                let mut it = series
                    .range((Bound::Included(from), Bound::Excluded(to)))
                    .map(|(_, r)| r);
                f(&mut it)
            }
            _ => f(&mut std::iter::empty()),
        }
    }
}

impl RecordSink for SeriesStore {
    fn append_batch(&self, records: &[Record]) -> Result<(), StoreError> {
        let mut encoded = Vec::new();
        for r in records {
            let bytes = encode_record(r)?;
            if self.wal.is_some() {
                encoded.extend_from_slice(&bytes);
                encoded.push(b'\n');
            }
        }
        if let Some(wal) = &self.wal {
            wal.lock().write_all(&encoded)?;
        }
        for r in records {
            self.insert(r.clone());
        }
        Ok(())
    }

    fn sync(&self) -> Result<(), StoreError> {
        if let Some(wal) = &self.wal {
            wal.lock().flush()?;
        }
        Ok(())
    }
}
