//! Configuration service: owns the versioned sensor hierarchy and
//! announces every change on the `configuration` topic, so running services
//! pick it up without a restart.

mod hierarchy;

use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hierarchy::{
    FlatNode, HierarchyError, HierarchySpec, NestedNode, SensorHierarchy, SensorKind, SensorNode, Violation,
    DEFAULT_ROOT_ID,
};

use crate::msglog::{self, Broker, LogError, TopicReader, CONFIGURATION_TOPIC};

/// Message key of every configuration event.
pub const CONFIGURATION_KEY: &[u8] = b"hierarchy";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid hierarchy: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("hierarchy storage: {0}")]
    Io(#[from] io::Error),
    #[error("stored hierarchy is unreadable: {0}")]
    Corrupt(String),
}

/// Whole-state change notification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConfigurationEvent {
    pub version: u64,
    pub full_hierarchy: SensorHierarchy,
}

impl ConfigurationEvent {
    pub fn new(hierarchy: SensorHierarchy) -> Self {
        Self {
            version: hierarchy.version(),
            full_hierarchy: hierarchy,
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        let event: Self = serde_json::from_slice(bytes)?;
        if event.version != event.full_hierarchy.version() {
            return Err(serde::de::Error::custom("event version differs from hierarchy version"));
        }
        Ok(event)
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("configuration event serializes")
    }
}

pub struct Registry {
    current: RwLock<Arc<SensorHierarchy>>,
    writer: Mutex<()>,
    path: Option<PathBuf>,
    broker: Arc<Broker>,
}

impl Registry {
    /// Starts the service. With a `path`, the hierarchy is loaded from and
    /// persisted to that JSON document. If the `configuration` topic lags
    /// behind the stored version, the current state is announced.
    pub fn open(broker: Arc<Broker>, path: Option<PathBuf>) -> Result<Self, RegistryError> {
        broker.ensure_topic(CONFIGURATION_TOPIC, 1)?;
        let hierarchy = match &path {
            Some(p) if p.exists() => serde_json::from_slice::<SensorHierarchy>(&fs::read(p)?)
                .map_err(|e| RegistryError::Corrupt(e.to_string()))?,
            _ => SensorHierarchy::initial(),
        };
        let registry = Self {
            current: RwLock::new(Arc::new(hierarchy)),
            writer: Mutex::new(()),
            path,
            broker,
        };
        let announced = latest_event(&registry.broker)?.map(|e| e.version).unwrap_or(0);
        let current = registry.get_hierarchy();
        if announced < current.version() {
            registry.announce(&current)?;
        }
        Ok(registry)
    }

    pub fn get_hierarchy(&self) -> Arc<SensorHierarchy> {
        Arc::clone(&self.current.read())
    }

    /// Replaces the hierarchy. Returns the new version once it is persisted
    /// and announced; nothing changes if validation fails.
    pub fn put_hierarchy(&self, spec: HierarchySpec) -> Result<u64, RegistryError> {
        let _guard = self.writer.lock();
        let version = self.current.read().version() + 1;
        let hierarchy = SensorHierarchy::build(version, spec).map_err(RegistryError::Invalid)?;
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            msglog::write_atomic(path, &serde_json::to_vec_pretty(&hierarchy).expect("hierarchy serializes"))?;
        }
        let hierarchy = Arc::new(hierarchy);
        *self.current.write() = Arc::clone(&hierarchy);
        self.announce(&hierarchy)?;
        Ok(version)
    }

    fn announce(&self, hierarchy: &SensorHierarchy) -> Result<(), RegistryError> {
        let event = ConfigurationEvent::new(hierarchy.clone());
        self.broker
            .publish(CONFIGURATION_TOPIC, CONFIGURATION_KEY, &event.encode())?;
        Ok(())
    }
}

/// Read-only hierarchy that follows the `configuration` topic, for services
/// that need the tree but do not own it.
pub struct HierarchyFollower {
    current: RwLock<Arc<SensorHierarchy>>,
    reader: Mutex<TopicReader>,
}

impl HierarchyFollower {
    pub fn new(broker: &Arc<Broker>) -> Result<Self, LogError> {
        broker.ensure_topic(CONFIGURATION_TOPIC, 1)?;
        let follower = Self {
            current: RwLock::new(Arc::new(SensorHierarchy::initial())),
            reader: Mutex::new(broker.reader(CONFIGURATION_TOPIC)?),
        };
        follower.catch_up();
        Ok(follower)
    }

    /// Latest announced hierarchy.
    pub fn get(&self) -> Arc<SensorHierarchy> {
        self.catch_up();
        Arc::clone(&self.current.read())
    }

    fn catch_up(&self) {
        let Some(mut reader) = self.reader.try_lock() else { return };
        let Ok(msgs) = reader.drain() else { return };
        let newest = msgs
            .iter()
            .filter_map(|m| ConfigurationEvent::decode(&m.value).ok())
            .max_by_key(|e| e.version);
        if let Some(e) = newest {
            let mut current = self.current.write();
            if e.version > current.version() {
                *current = Arc::new(e.full_hierarchy);
            }
        }
    }
}

/// Most recent event on the `configuration` topic, if any.
pub fn latest_event(broker: &Arc<Broker>) -> Result<Option<ConfigurationEvent>, LogError> {
    let mut reader = broker.reader(CONFIGURATION_TOPIC)?;
    Ok(reader
        .drain()?
        .iter()
        .filter_map(|m| ConfigurationEvent::decode(&m.value).ok())
        .max_by_key(|e| e.version))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pilot() -> HierarchySpec {
        let servers = [6usize, 5, 5];
        let mut n = 0;
        let groups = servers
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let leaves = (0..k)
                    .map(|_| {
                        n += 1;
                        NestedNode::machine(format!("pdu-{}/server-{n}", i + 1))
                    })
                    .collect();
                NestedNode::group(format!("pdu-{}", i + 1), leaves)
            })
            .collect();
        HierarchySpec::nested(NestedNode::group("root", groups))
    }

    fn events(broker: &Arc<Broker>) -> Vec<ConfigurationEvent> {
        broker
            .reader(CONFIGURATION_TOPIC)
            .unwrap()
            .drain()
            .unwrap()
            .iter()
            .map(|m| ConfigurationEvent::decode(&m.value).unwrap())
            .collect()
    }

    #[test]
    fn fresh_service_serves_initial_hierarchy() {
        let broker = Broker::in_memory();
        let reg = Registry::open(Arc::clone(&broker), None).unwrap();
        let h = reg.get_hierarchy();
        assert_eq!(h.version(), 1);
        assert_eq!(h.len(), 1);
        assert_eq!(events(&broker).len(), 1);
    }

    #[test]
    fn put_bumps_version_and_announces() {
        let broker = Broker::in_memory();
        let reg = Registry::open(Arc::clone(&broker), None).unwrap();
        assert_eq!(reg.put_hierarchy(pilot()).unwrap(), 2);
        let h = reg.get_hierarchy();
        assert_eq!(h.version(), 2);
        assert_eq!(h.leaf_descendants("root").unwrap().len(), 16);
        let evs = events(&broker);
        assert_eq!(evs.iter().map(|e| e.version).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(evs.last().unwrap().full_hierarchy, *h);
    }

    #[test]
    fn invalid_put_publishes_nothing() {
        let broker = Broker::in_memory();
        let reg = Registry::open(Arc::clone(&broker), None).unwrap();
        let bad = HierarchySpec::Flat {
            nodes: vec![FlatNode {
                identifier: "a".into(),
                name: None,
                parent: Some("a".into()),
                kind: None,
            }],
        };
        assert!(matches!(reg.put_hierarchy(bad), Err(RegistryError::Invalid(_))));
        assert_eq!(reg.get_hierarchy().version(), 1);
        assert_eq!(events(&broker).len(), 1);
    }

    #[test]
    fn moving_a_leaf_changes_its_ancestors() {
        let broker = Broker::in_memory();
        let reg = Registry::open(broker, None).unwrap();
        reg.put_hierarchy(pilot()).unwrap();
        let mut tree = reg.get_hierarchy().to_nested();
        let groups = tree.children.as_mut().unwrap();
        let moved = groups[0].children.as_mut().unwrap().remove(0);
        let id = moved.identifier.clone();
        groups[1].children.as_mut().unwrap().push(moved);
        reg.put_hierarchy(HierarchySpec::nested(tree)).unwrap();
        let a: Vec<String> = reg.get_hierarchy().ancestors(&id).unwrap().into_iter().map(String::from).collect();
        assert_eq!(a, ["pdu-2", "root"]);
    }

    #[test]
    fn follower_sees_puts() {
        let broker = Broker::in_memory();
        let reg = Registry::open(Arc::clone(&broker), None).unwrap();
        let follower = HierarchyFollower::new(&broker).unwrap();
        assert_eq!(follower.get().version(), 1);
        reg.put_hierarchy(pilot()).unwrap();
        assert_eq!(*follower.get(), *reg.get_hierarchy());
    }

    #[test]
    fn persisted_across_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hierarchy.json");
        let broker = Broker::in_memory();
        {
            let reg = Registry::open(Arc::clone(&broker), Some(path.clone())).unwrap();
            reg.put_hierarchy(pilot()).unwrap();
        }
        let reg = Registry::open(Arc::clone(&broker), Some(path)).unwrap();
        assert_eq!(reg.get_hierarchy().version(), 2);
        // Already announced, so no duplicate event.
        assert_eq!(events(&broker).len(), 2);
    }
}
