//! A node runs the backend services in one process: the message log, the
//! configuration service, the history store with its query API, the
//! ingestion endpoints and any number of aggregator workers.

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use parking_lot::Mutex;
use thiserror::Error;
use tokio::net::TcpListener;

use crate::aggregator::{run_worker, AggregatorError, Metrics, MetricsSnapshot, WorkerConfig, WorkerHandle};
use crate::api;
use crate::bridge::TopicSink;
use crate::history::{RecordSink, SeriesStore, StoreError};
use crate::msglog::{Broker, BrokerConfig, LogError, AGGREGATED_RECORDS_TOPIC, GROUPED_RECORDS_TOPIC, RECORDS_TOPIC};
use crate::registry::{HierarchyFollower, Registry, RegistryError};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error("no worker named {0}")]
    UnknownWorker(String),
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    /// Holds the hierarchy document and the history store. Everything stays
    /// in memory without it.
    pub data_dir: Option<PathBuf>,
    /// Message log directory; defaults to `<data_dir>/log`.
    pub log_dir: Option<PathBuf>,
    pub partitions: u32,
    /// Instance ids of the aggregator workers to start.
    pub workers: Vec<String>,
    pub session_timeout: Duration,
    pub max_poll_records: usize,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            log_dir: None,
            partitions: 8,
            workers: vec!["aggregator-0".into()],
            session_timeout: BrokerConfig::default().session_timeout,
            max_poll_records: WorkerConfig::default().max_poll_records,
        }
    }
}

pub struct Node {
    config: NodeConfig,
    broker: Arc<Broker>,
    registry: Arc<Registry>,
    store: Arc<SeriesStore>,
    follower: Arc<HierarchyFollower>,
    workers: Mutex<Vec<WorkerHandle>>,
    metrics: Mutex<Vec<Arc<Metrics>>>,
}

impl Node {
    pub fn start(config: NodeConfig) -> Result<Self, NodeError> {
        let broker_config = BrokerConfig {
            session_timeout: config.session_timeout,
        };
        let log_dir = config
            .log_dir
            .clone()
            .or_else(|| config.data_dir.as_ref().map(|d| d.join("log")));
        let broker = match &log_dir {
            Some(dir) => Broker::open(dir, broker_config)?,
            None => Broker::with_config(broker_config),
        };
        for topic in [RECORDS_TOPIC, GROUPED_RECORDS_TOPIC, AGGREGATED_RECORDS_TOPIC] {
            broker.ensure_topic(topic, config.partitions)?;
        }
        let registry = Arc::new(Registry::open(
            Arc::clone(&broker),
            config.data_dir.as_ref().map(|d| d.join("hierarchy.json")),
        )?);
        let store = Arc::new(match &config.data_dir {
            Some(d) => SeriesStore::open(d.join("history"))?,
            None => SeriesStore::in_memory(),
        });
        let follower = Arc::new(HierarchyFollower::new(&broker)?);
        let node = Self {
            config: config.clone(),
            broker,
            registry,
            store,
            follower,
            workers: Mutex::new(Vec::new()),
            metrics: Mutex::new(Vec::new()),
        };
        for id in &config.workers {
            node.add_worker(id)?;
        }
        Ok(node)
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn store(&self) -> &Arc<SeriesStore> {
        &self.store
    }

    pub fn add_worker(&self, instance_id: &str) -> Result<(), NodeError> {
        let sink: Arc<dyn RecordSink> = Arc::clone(&self.store) as Arc<dyn RecordSink>;
        let handle = run_worker(
            Arc::clone(&self.broker),
            sink,
            WorkerConfig {
                instance_id: instance_id.to_string(),
                partitions: self.config.partitions,
                max_poll_records: self.config.max_poll_records,
                ..WorkerConfig::default()
            },
        )?;
        self.metrics.lock().push(handle.metrics_handle());
        self.workers.lock().push(handle);
        Ok(())
    }

    fn take_worker(&self, instance_id: &str) -> Result<WorkerHandle, NodeError> {
        let mut workers = self.workers.lock();
        let idx = workers
            .iter()
            .position(|w| w.instance_id() == instance_id)
            .ok_or_else(|| NodeError::UnknownWorker(instance_id.to_string()))?;
        Ok(workers.remove(idx))
    }

    /// Kills a worker without letting it commit or leave its group.
    pub fn kill_worker(&self, instance_id: &str) -> Result<(), NodeError> {
        self.take_worker(instance_id)?.kill();
        Ok(())
    }

    pub fn stop_worker(&self, instance_id: &str) -> Result<(), NodeError> {
        Ok(self.take_worker(instance_id)?.stop()?)
    }

    pub fn worker_ids(&self) -> Vec<String> {
        self.workers
            .lock()
            .iter()
            .map(|w| w.instance_id().to_string())
            .collect()
    }

    /// Counters summed over every worker this node has run.
    pub fn metrics(&self) -> MetricsSnapshot {
        self.metrics.lock().iter().map(|m| m.snapshot()).sum()
    }

    pub fn router(self: &Arc<Self>) -> Router {
        let node = Arc::clone(self);
        Router::new()
            .merge(api::registry_routes(Arc::clone(&self.registry)))
            .merge(api::history_routes(Arc::clone(&self.store), Arc::clone(&self.follower)))
            .merge(api::ingest_routes(TopicSink::new(Arc::clone(&self.broker))))
            .merge(api::metrics_routes(Arc::new(move || node.metrics())))
    }

    /// Stops all workers and flushes the history store.
    pub fn shutdown(&self) -> Result<(), NodeError> {
        let workers: Vec<WorkerHandle> = self.workers.lock().drain(..).collect();
        for w in workers {
            w.stop()?;
        }
        self.store.sync()?;
        Ok(())
    }
}

/// Serves `router` until `shutdown` resolves.
pub async fn serve(listener: TcpListener, router: Router, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router)
        .with_graceful_shutdown(shutdown)
        .await
}
