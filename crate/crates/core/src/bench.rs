//! Scalability experiment: processed records per second as a function of
//! the number of aggregator workers, under a simulated offered load.
//!
//! Every repetition runs against a fresh in-process log. Throughput is the
//! increase of the workers' `processed_records_total` counters over the
//! measurement window, after a warm-up that absorbs rebalancing.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{run_worker, AggregatorError, WorkerConfig, WorkerHandle, AGGREGATOR_GROUP};
use crate::bridge::{run_simulator, RecordPublisher, SimulatedBridge, SimulatorConfig, TopicSink};
use crate::history::{RecordSink, SeriesStore, StoreError};
use crate::msglog::{Broker, BrokerConfig, LogError, AGGREGATED_RECORDS_TOPIC, GROUPED_RECORDS_TOPIC, RECORDS_TOPIC};
use crate::records::Record;
use crate::registry::{HierarchySpec, NestedNode, Registry, RegistryError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("only {joined} of {expected} workers joined the consumer group within {timeout:?}; owners: {owners:?}")]
    JoinTimeout {
        expected: usize,
        joined: usize,
        timeout: Duration,
        owners: Vec<String>,
    },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ExperimentConfig {
    pub bridges: u32,
    pub sensors_per_bridge: u32,
    pub period_ms: u64,
    pub partitions: u32,
    pub worker_counts: Vec<usize>,
    pub repetitions: u32,
    pub measure_window_sec: f64,
    pub seed: u64,
    pub warmup_sec: f64,
    /// Emulated round trip to a remote history store, paid once per batch.
    pub store_round_trip_ms: f64,
    pub max_poll_records: usize,
    pub join_timeout_sec: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bridges: 2,
            sensors_per_bridge: 50,
            period_ms: 100,
            partitions: 8,
            worker_counts: vec![1, 2, 4],
            repetitions: 10,
            measure_window_sec: 30.0,
            seed: 1,
            warmup_sec: 10.0,
            store_round_trip_ms: 0.0,
            max_poll_records: 500,
            join_timeout_sec: 30.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.to_string()));
        if self.bridges == 0 || self.sensors_per_bridge == 0 || self.period_ms == 0 || self.partitions == 0 {
            return bad("bridges, sensorsPerBridge, periodMs and partitions must be at least 1");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.worker_counts.is_empty() || self.worker_counts.contains(&0) {
            return bad("workerCounts must be a non-empty list of positive counts");
        }
        if self.worker_counts.windows(2).any(|w| w[0] >= w[1]) {
            return bad("workerCounts must be strictly ascending");
        }
        // Written so that NaN fails as well.
        let positive = |x: f64| x > 0.0;
        let non_negative = |x: f64| x >= 0.0;
        if !positive(self.measure_window_sec) || !non_negative(self.warmup_sec) || !positive(self.join_timeout_sec) {
            return bad("measureWindowSec and joinTimeoutSec must be positive, warmupSec non-negative");
        }
        if !non_negative(self.store_round_trip_ms) || self.max_poll_records == 0 {
            return bad("storeRoundTripMs must be non-negative and maxPollRecords positive");
        }
        Ok(())
    }

    pub fn simulator(&self) -> SimulatorConfig {
        SimulatorConfig::new(self.bridges, self.sensors_per_bridge, self.period_ms, self.seed)
    }

    pub fn offered_load(&self) -> f64 {
        self.simulator().offered_load()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkerCountResult {
    pub workers: usize,
    pub samples: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Environment {
    pub cpus: usize,
    pub os: String,
    pub arch: String,
    pub version: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            cpus: thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub offered_load: f64,
    pub results: Vec<WorkerCountResult>,
    pub environment: Environment,
}

impl ExperimentReport {
    pub fn result(&self, workers: usize) -> Option<&WorkerCountResult> {
        self.results.iter().find(|r| r.workers == workers)
    }

    /// One row per repetition: `workers,repetition,records_per_sec`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("workers,repetition,records_per_sec\n");
        for r in &self.results {
            for (i, s) in r.samples.iter().enumerate() {
                let _ = writeln!(out, "{},{},{:.3}", r.workers, i + 1, s);
            }
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes the CSV table to `csv` and the summary next to it
    /// (`<csv stem>.summary.json`).
    pub fn write(&self, csv: &Path) -> Result<std::path::PathBuf, BenchError> {
        if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(csv, self.to_csv())?;
        let summary = csv.with_extension("summary.json");
        std::fs::write(&summary, self.summary_json())?;
        Ok(summary)
    }
}

/// First quartile, median and third quartile, interpolated between order
/// statistics (the common "type 7" definition).
pub fn quartiles(samples: &[f64]) -> (f64, f64, f64) {
    let mut s: Vec<f64> = samples.iter().copied().filter(|x| !x.is_nan()).collect();
    if s.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (s.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        s[lo] + (h - lo as f64) * (s[hi] - s[lo])
    };
    (q(0.25), q(0.5), q(0.75))
}

/// History sink that pays a fixed round trip per batch before storing.
pub struct RemoteStoreEmulation {
    inner: Arc<SeriesStore>,
    round_trip: Duration,
}

impl RemoteStoreEmulation {
    pub fn new(inner: Arc<SeriesStore>, round_trip: Duration) -> Self {
        Self { inner, round_trip }
    }
}

impl RecordSink for RemoteStoreEmulation {
    fn append_batch(&self, records: &[Record]) -> Result<(), StoreError> {
        if !self.round_trip.is_zero() {
            thread::sleep(self.round_trip);
        }
        self.inner.append_batch(records)
    }

    fn sync(&self) -> Result<(), StoreError> {
        self.inner.sync()
    }
}

/// Hierarchy of the simulated sensors: one group per bridge below the root.
pub fn simulator_hierarchy(sim: &SimulatorConfig) -> HierarchySpec {
    let groups = (0..sim.bridges)
        .map(|b| {
            let leaves = (0..sim.sensors_per_bridge)
                .map(|s| NestedNode::machine(SimulatorConfig::sensor_id(b, s).into_string()))
                .collect();
            NestedNode::group(format!("bridge-{b}"), leaves)
        })
        .collect();
    HierarchySpec::nested(NestedNode::group("root", groups))
}

struct Setup {
    broker: Arc<Broker>,
    sink: Arc<dyn RecordSink>,
    _registry: Registry,
}

fn setup(config: &ExperimentConfig) -> Result<Setup, BenchError> {
    let broker = Broker::with_config(BrokerConfig::default());
    for topic in [RECORDS_TOPIC, GROUPED_RECORDS_TOPIC, AGGREGATED_RECORDS_TOPIC] {
        broker.create_topic(topic, config.partitions)?;
    }
    let registry = Registry::open(Arc::clone(&broker), None)?;
    registry.put_hierarchy(simulator_hierarchy(&config.simulator()))?;
    let store = Arc::new(SeriesStore::in_memory());
    let sink: Arc<dyn RecordSink> = Arc::new(RemoteStoreEmulation::new(
        store,
        Duration::from_secs_f64(config.store_round_trip_ms / 1000.0),
    ));
    Ok(Setup {
        broker,
        sink,
        _registry: registry,
    })
}

fn start_workers(config: &ExperimentConfig, setup: &Setup, n: usize) -> Result<Vec<WorkerHandle>, BenchError> {
    (0..n)
        .map(|i| {
            run_worker(
                Arc::clone(&setup.broker),
                Arc::clone(&setup.sink),
                WorkerConfig {
                    instance_id: format!("bench-worker-{i:03}"),
                    partitions: config.partitions,
                    max_poll_records: config.max_poll_records,
                    ..WorkerConfig::default()
                },
            )
            .map_err(BenchError::from)
        })
        .collect()
}

/// Waits until every partition is owned and the ownership is spread over
/// as many workers as can get one.
fn await_group(config: &ExperimentConfig, broker: &Broker, n: usize) -> Result<(), BenchError> {
    let timeout = Duration::from_secs_f64(config.join_timeout_sec);
    let deadline = Instant::now() + timeout;
    let total = 2 * config.partitions as usize;
    let expected = n.min(config.partitions as usize);
    loop {
        let ownership = broker.group_ownership(AGGREGATOR_GROUP);
        let owners: BTreeSet<String> = ownership.values().cloned().collect();
        if ownership.len() == total && owners.len() == expected && broker.group_members(AGGREGATOR_GROUP).len() == n {
            return Ok(());
        }
        if Instant::now() >= deadline {
            return Err(BenchError::JoinTimeout {
                expected: n,
                joined: broker.group_members(AGGREGATOR_GROUP).len(),
                timeout,
                owners: owners.into_iter().collect(),
            });
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn processed(workers: &[WorkerHandle]) -> u64 {
    workers.iter().map(|w| w.metrics().processed_records_total).sum()
}

fn stop_all(workers: Vec<WorkerHandle>) -> Result<(), BenchError> {
    for w in workers {
        w.stop()?;
    }
    Ok(())
}

/// One measurement: records per second processed by `n` workers.
pub fn run_repetition(config: &ExperimentConfig, n: usize) -> Result<f64, BenchError> {
    let setup = setup(config)?;
    let workers = start_workers(config, &setup, n)?;
    if let Err(e) = await_group(config, &setup.broker, n) {
        let _ = stop_all(workers);
        return Err(e);
    }
    let simulator = run_simulator(config.simulator(), TopicSink::new(Arc::clone(&setup.broker)))
        .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    thread::sleep(Duration::from_secs_f64(config.warmup_sec));
    let window = Duration::from_secs_f64(config.measure_window_sec);
    let start_count = processed(&workers);
    let start = Instant::now();
    thread::sleep(window);
    let end_count = processed(&workers);
    let elapsed = start.elapsed().as_secs_f64();
    simulator.stop();
    stop_all(workers)?;
    Ok((end_count - start_count) as f64 / elapsed)
}

/// Runs every worker count `repetitions` times. `progress` sees each sample.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    mut progress: impl FnMut(usize, u32, f64),
) -> Result<ExperimentReport, BenchError> {
    config.validate()?;
    let mut results = Vec::new();
    for &n in &config.worker_counts {
        let mut samples = Vec::with_capacity(config.repetitions as usize);
        for rep in 1..=config.repetitions {
            let throughput = run_repetition(config, n)?;
            progress(n, rep, throughput);
            samples.push(throughput);
        }
        let (q1, median, q3) = quartiles(&samples);
        results.push(WorkerCountResult {
            workers: n,
            samples,
            median,
            q1,
            q3,
            iqr: q3 - q1,
        });
    }
    Ok(ExperimentReport {
        config: config.clone(),
        offered_load: config.offered_load(),
        results,
        environment: Environment::current(),
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, BenchError> {
    run_experiment_with(config, |workers, rep, t| {
        tracing::info!(workers, repetition = rep, records_per_sec = t, "bench sample");
    })
}

/// Records per second a single worker sustains when it never runs out of
/// input: a backlog is published up front and the worker's drain rate is
/// measured.
pub fn calibrate_single_worker_capacity(config: &ExperimentConfig) -> Result<f64, BenchError> {
    config.validate()?;
    let sim = config.simulator();
    let mut backlog = 50_000usize;
    loop {
        let setup = setup(config)?;
        let sink = TopicSink::new(Arc::clone(&setup.broker));
        let mut bridges: Vec<SimulatedBridge> = (0..sim.bridges).map(|b| SimulatedBridge::new(&sim, b)).collect();
        let mut published = 0usize;
        let mut tick = 0i64;
        while published < backlog {
            for b in &mut bridges {
                let records = b.next_records(tick * sim.period_ms as i64);
                sink.publish_batch(&records)
                    .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
                published += records.len();
            }
            tick += 1;
        }
        let workers = start_workers(config, &setup, 1)?;
        await_group(config, &setup.broker, 1)?;
        thread::sleep(Duration::from_secs_f64(config.warmup_sec.min(2.0)));
        let start_count = processed(&workers);
        let start = Instant::now();
        thread::sleep(Duration::from_secs_f64(config.measure_window_sec));
        let end_count = processed(&workers);
        let elapsed = start.elapsed().as_secs_f64();
        stop_all(workers)?;
        if (end_count as usize) < published {
            return Ok((end_count - start_count) as f64 / elapsed);
        }
        // The backlog ran dry during the window; retry with more.
        backlog *= 4;
    }
}
