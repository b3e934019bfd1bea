//! End-to-end acceptance suite. Runs each criterion in turn and prints one
//! PASS/FAIL line per criterion; exits non-zero if any fails.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use common::*;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::Client;
use serde_json::{json, Value};
use wattflow::aggregator::{run_worker, WorkerConfig, WorkerHandle};
use wattflow::bench::{calibrate_single_worker_capacity, run_experiment_with, simulator_hierarchy, ExperimentConfig};
use wattflow::bridge::{run_simulator, HttpPublisher, RecordPublisher, SimulatorConfig, TopicSink};
use wattflow::history::{RecordSink, SeriesStore, StoreError};
use wattflow::msglog::{
    partition_for, Broker, BrokerConfig, Consumer, PollOutcome, TopicPartition, AGGREGATED_RECORDS_TOPIC,
    GROUPED_RECORDS_TOPIC, RECORDS_TOPIC,
};
use wattflow::node::{Node, NodeConfig};
use wattflow::records::{decode_active_power, decode_record, ActivePowerRecord, Record};
use wattflow::registry::Registry;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("aggregation oracle equivalence", aggregation_oracle),
        ("scalability shape", scalability),
        ("keyed routing invariants", keyed_routing),
        ("fault tolerance", fault_tolerance),
        ("live reconfiguration", live_reconfiguration),
        ("ingestion contract", ingestion_contract),
        ("query oracle suite", query_oracles),
        ("end-to-end latency", latency),
    ];
    // Optional criterion numbers select a subset, e.g. `-- 1 4`.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name} ({secs:.1}s) {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.1}s) {reason}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Pipeline {
    broker: Arc<Broker>,
    registry: Registry,
    store: Arc<SeriesStore>,
}

impl Pipeline {
    fn new(partitions: u32, session_timeout: Duration) -> Self {
        let broker = Broker::with_config(BrokerConfig { session_timeout });
        for t in [RECORDS_TOPIC, GROUPED_RECORDS_TOPIC, AGGREGATED_RECORDS_TOPIC] {
            broker.create_topic(t, partitions).unwrap();
        }
        Self {
            registry: Registry::open(Arc::clone(&broker), None).unwrap(),
            store: Arc::new(SeriesStore::in_memory()),
            broker,
        }
    }

    fn worker(&self, id: &str) -> WorkerHandle {
        run_worker(
            Arc::clone(&self.broker),
            Arc::clone(&self.store) as Arc<dyn RecordSink>,
            WorkerConfig::new(id),
        )
        .unwrap()
    }

    fn publish(&self, records: &[ActivePowerRecord]) {
        TopicSink::new(Arc::clone(&self.broker)).publish_batch(records).unwrap();
    }
}

fn aggregation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    for case in 0..100 {
        let tree = random_tree(&mut rng, 5, 50);
        let records = random_records(&mut rng, &tree, 10_000);
        let p = Pipeline::new(4, Duration::from_secs(3));
        p.registry.put_hierarchy(tree.spec()).unwrap();
        let w = p.worker("w0");
        p.publish(&records);
        ensure(wait_drained(&p.broker, Duration::from_secs(60)), || format!("case {case} did not drain"))?;
        w.stop().map_err(|e| e.to_string())?;
        compare(&final_aggregates(&p.broker), &oracle(&tree, &records)).map_err(|e| format!("case {case}: {e}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("100 cases x 10^4 records in {:.1}s", elapsed.as_secs_f64()))
}

fn scalability() -> Outcome {
    let mut config = ExperimentConfig {
        bridges: 4,
        sensors_per_bridge: 50,
        period_ms: 100,
        partitions: 8,
        worker_counts: vec![1, 2, 4, 8, 12],
        repetitions: 10,
        warmup_sec: 1.0,
        measure_window_sec: 2.0,
        store_round_trip_ms: 25.0,
        max_poll_records: 100,
        ..ExperimentConfig::default()
    };
    let capacity = calibrate_single_worker_capacity(&config).map_err(|e| e.to_string())?;
    // Offer about four times what one worker sustains.
    let per_sensor = 1000.0 / config.period_ms as f64;
    let sensors = (4.0 * capacity / per_sensor).ceil() as u32;
    config.sensors_per_bridge = sensors.div_ceil(config.bridges);
    let report = run_experiment_with(&config, |_, _, _| {}).map_err(|e| e.to_string())?;
    let median = |n: usize| report.result(n).unwrap().median;
    let (t1, t2, t4, t8, t12) = (median(1), median(2), median(4), median(8), median(12));
    let detail = format!(
        "capacity {capacity:.0}/s, offered {:.0}/s, medians 1:{t1:.0} 2:{t2:.0} 4:{t4:.0} 8:{t8:.0} 12:{t12:.0}",
        config.offered_load()
    );
    ensure(t1 <= t2 && t2 <= t4, || format!("not monotone: {detail}"))?;
    ensure(t4 >= 2.0 * t1, || format!("T(4) < 2 T(1): {detail}"))?;
    ensure(t12 <= 1.1 * t8, || format!("T(12) > 1.1 T(8): {detail}"))?;
    Ok(detail)
}

/// FNV-1a over u128 arithmetic, independent of the library's version.
fn fnv_oracle(key: &[u8]) -> u64 {
    let mut h: u128 = 14695981039346656037;
    for &b in key {
        h ^= b as u128;
        h = (h * 1099511628211) % (1u128 << 64);
    }
    h as u64
}

fn keyed_routing() -> Outcome {
    const PARTITIONS: u32 = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seen: HashMap<Vec<u8>, u32> = HashMap::new();
    for _ in 0..1_000_000 {
        // A bounded key space so that equal keys recur.
        let len = rng.gen_range(1..12);
        let key: Vec<u8> = (0..len).map(|_| rng.gen_range(b'a'..=b'h')).collect();
        let p = partition_for(&key, PARTITIONS);
        ensure(p as u64 == fnv_oracle(&key) % PARTITIONS as u64, || format!("{key:?} routed to {p}"))?;
        let first = *seen.entry(key.clone()).or_insert(p);
        ensure(first == p, || format!("{key:?} routed to {first} and {p}"))?;
    }
    let repeated = 1_000_000 - seen.len();

    for members in [1usize, 12, 25] {
        let broker = Broker::in_memory();
        broker.create_topic("t", PARTITIONS).unwrap();
        let mut consumers: Vec<Consumer> = (0..members).map(|_| broker.subscribe("g", &["t"]).unwrap()).collect();
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            for c in &mut consumers {
                if let Ok(PollOutcome::Messages(_)) | Ok(PollOutcome::Rebalanced(_)) = c.poll(1) {}
            }
            let total: usize = consumers.iter().map(|c| c.assignment().len()).sum();
            let union: BTreeSet<&TopicPartition> = consumers.iter().flat_map(|c| c.assignment()).collect();
            let all: BTreeSet<TopicPartition> = (0..PARTITIONS).map(|p| TopicPartition::new("t", p)).collect();
            if total == PARTITIONS as usize && union.len() == total && union.into_iter().cloned().collect::<BTreeSet<_>>() == all {
                let busy = consumers.iter().filter(|c| !c.assignment().is_empty()).count();
                ensure(busy == members.min(PARTITIONS as usize), || format!("{members} members, {busy} busy"))?;
                break;
            }
            ensure(Instant::now() < deadline, || format!("{members} members: no stable partition of the partition set"))?;
        }
    }
    Ok(format!("10^6 keys ({repeated} repeats), member counts 1/12/25 over 20 partitions"))
}

fn fault_tolerance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tree = random_tree(&mut rng, 5, 50);
    let records = random_records(&mut rng, &tree, 10_000);
    let p = Pipeline::new(8, Duration::from_millis(500));
    p.registry.put_hierarchy(tree.spec()).unwrap();
    let mut workers: Vec<WorkerHandle> = (0..3).map(|i| p.worker(&format!("w{i}"))).collect();
    let publisher = {
        let sink = TopicSink::new(Arc::clone(&p.broker));
        let records = records.clone();
        thread::spawn(move || {
            for chunk in records.chunks(500) {
                sink.publish_batch(chunk).unwrap();
                thread::sleep(Duration::from_millis(20));
            }
        })
    };
    let total = |ws: &[WorkerHandle]| ws.iter().map(|w| w.metrics().processed_records_total).sum::<u64>();
    ensure(
        wait_until(Duration::from_secs(20), || total(&workers) >= 3_000 && workers[1].metrics().processed_records_total >= 300),
        || "workers did not get going".into(),
    )?;
    let victim = workers.remove(1);
    let killed_after = victim.metrics().processed_records_total;
    victim.kill();
    let processed_at_kill = killed_after + total(&workers);
    publisher.join().map_err(|_| "publisher panicked".to_string())?;
    ensure(wait_drained(&p.broker, Duration::from_secs(60)), || "did not drain".into())?;
    compare(&final_aggregates(&p.broker), &oracle(&tree, &records))?;
    let missing = records
        .iter()
        .filter(|r| p.store.get(r.identifier.as_str(), r.timestamp).is_none())
        .count();
    ensure(missing == 0, || format!("{missing} records never processed"))?;
    for w in workers {
        w.stop().map_err(|e| e.to_string())?;
    }
    Ok(format!(
        "killed a worker after it processed {killed_after} ({processed_at_kill} in total); oracle matched, all 10^4 stored"
    ))
}

fn hierarchy_json(moved_to_b: bool) -> Value {
    let sensors: Vec<String> = (0..10).map(|s| format!("sim-0-{s}")).collect();
    let mut a: Vec<Value> = sensors[..5].iter().map(|s| json!({ "identifier": s })).collect();
    let mut b: Vec<Value> = sensors[5..].iter().map(|s| json!({ "identifier": s })).collect();
    if moved_to_b {
        b.push(a.remove(0));
    }
    json!({"root": {"identifier": "root", "children": [
        {"identifier": "group-a", "children": a},
        {"identifier": "group-b", "children": b}
    ]}})
}

fn live_reconfiguration() -> Outcome {
    let node = Arc::new(
        Node::start(NodeConfig {
            partitions: 4,
            workers: vec!["w0".into(), "w1".into()],
            ..NodeConfig::default()
        })
        .map_err(|e| e.to_string())?,
    );
    let server = Server::start(node.router());
    let client = Client::new();
    let put = |moved: bool| -> Result<u64, String> {
        let r = client
            .put(server.url("/api/hierarchy"))
            .json(&hierarchy_json(moved))
            .send()
            .map_err(|e| e.to_string())?;
        ensure(r.status().is_success(), || format!("PUT returned {}", r.status()))?;
        Ok(r.json::<Value>().map_err(|e| e.to_string())?["version"].as_u64().unwrap())
    };
    let latest_count = |group: &str| -> Option<(i64, u64)> {
        let v: Value = client.get(server.url(&format!("/api/power/{group}/latest"))).send().ok()?.json().ok()?;
        Some((v["timestamp"].as_i64()?, v["count"].as_u64()?))
    };
    let v1 = put(false)?;
    let sim = run_simulator(SimulatorConfig::new(1, 10, 100, 5), Arc::new(HttpPublisher::new(&server.base)))
        .map_err(|e| e.to_string())?;
    let members_before = node.broker().group_members(wattflow::aggregator::AGGREGATOR_GROUP);
    ensure(
        wait_until(Duration::from_secs(10), || {
            latest_count("group-a").map(|c| c.1) == Some(5) && latest_count("group-b").map(|c| c.1) == Some(5)
        }),
        || "initial aggregates never complete".into(),
    )?;

    let switched_at = now_ms();
    let v2 = put(true)?;
    ensure(v2 > v1, || "version did not increase".into())?;
    let converged = wait_until(Duration::from_secs(5), || {
        matches!(latest_count("group-b"), Some((ts, 6)) if ts > switched_at)
            && matches!(latest_count("group-a"), Some((ts, 4)) if ts > switched_at)
    });
    let latency = now_ms() - switched_at;
    ensure(converged, || {
        format!("not converged after 5s: a={:?} b={:?}", latest_count("group-a"), latest_count("group-b"))
    })?;
    // Keep the flow running, then check that every later aggregate uses the new grouping.
    let settled = now_ms();
    thread::sleep(Duration::from_secs(1));
    sim.stop();
    let counts: Vec<(String, u64)> = node
        .broker()
        .reader(AGGREGATED_RECORDS_TOPIC)
        .unwrap()
        .drain()
        .unwrap()
        .into_iter()
        .filter_map(|m| match decode_record(&m.value).ok()? {
            Record::Aggregated(a) if a.timestamp > settled => Some((a.identifier.into_string(), a.count)),
            _ => None,
        })
        .collect();
    let wrong: Vec<&(String, u64)> = counts
        .iter()
        .filter(|(g, c)| (g == "group-a" && *c != 4) || (g == "group-b" && *c != 6) || (g == "root" && *c != 10))
        .collect();
    ensure(!counts.is_empty() && wrong.is_empty(), || format!("stale aggregates after the move: {wrong:?}"))?;
    let members_after = node.broker().group_members(wattflow::aggregator::AGGREGATOR_GROUP);
    ensure(members_before == members_after, || "workers restarted".into())?;
    drop(server);
    node.shutdown().map_err(|e| e.to_string())?;
    Ok(format!("converged {latency} ms after PUT; {} later aggregates consistent", counts.len()))
}

fn ingestion_contract() -> Outcome {
    let node = Arc::new(Node::start(NodeConfig::default()).map_err(|e| e.to_string())?);
    let server = Server::start(node.router());
    let outlets: Vec<Value> = (1..=3)
        .map(|o| {
            json!({"outletId": format!("outlet-{o}"), "samples": [
                {"timestamp": 1_000 + o, "metric": "active-power", "value": 100.0 * o as f64},
                {"timestamp": 1_000 + o, "metric": "voltage", "value": 230.0}
            ]})
        })
        .collect();
    let r = Client::new()
        .post(server.url("/ingest/pdu"))
        .json(&json!({"pduId": "pdu-7", "outlets": outlets}))
        .send()
        .map_err(|e| e.to_string())?;
    ensure(r.status().is_success(), || format!("status {}", r.status()))?;
    let mut got: Vec<(String, i64, f64)> = node
        .broker()
        .reader(RECORDS_TOPIC)
        .unwrap()
        .drain()
        .unwrap()
        .iter()
        .map(|m| {
            let r = decode_active_power(&m.value).unwrap();
            (r.identifier.into_string(), r.timestamp, r.value_in_w)
        })
        .collect();
    got.sort_by(|a, b| a.0.cmp(&b.0));
    let expected: Vec<(String, i64, f64)> = (1..=3).map(|o| (format!("pdu-7/outlet-{o}"), 1_000 + o, 100.0 * o as f64)).collect();
    ensure(got == expected, || format!("records on topic: {got:?}"))?;
    drop(server);
    node.shutdown().map_err(|e| e.to_string())?;
    Ok("3 outlets x 2 samples gave exactly 3 records".into())
}

fn query_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        check_query_dataset(&mut rng).map_err(|e| format!("dataset {case}: {e}"))?;
    }
    Ok("1000 datasets".into())
}

fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_millis() as i64
}

/// Store wrapper that notes, for every aggregate, how long after its
/// triggering record's timestamp it became queryable.
struct LatencyProbe {
    inner: SeriesStore,
    samples: Mutex<Vec<i64>>,
    recording: std::sync::atomic::AtomicBool,
}

impl RecordSink for LatencyProbe {
    fn append_batch(&self, records: &[Record]) -> Result<(), StoreError> {
        self.inner.append_batch(records)?;
        if self.recording.load(std::sync::atomic::Ordering::Relaxed) {
            let now = now_ms();
            let mut samples = self.samples.lock();
            for r in records {
                if let Record::Aggregated(a) = r {
                    samples.push(now - a.timestamp);
                }
            }
        }
        Ok(())
    }
}

fn latency() -> Outcome {
    let sim = SimulatorConfig::new(2, 50, 100, 8);
    let p = Pipeline::new(8, Duration::from_secs(3));
    p.registry.put_hierarchy(simulator_hierarchy(&sim)).unwrap();
    let probe = Arc::new(LatencyProbe {
        inner: SeriesStore::in_memory(),
        samples: Mutex::new(Vec::new()),
        recording: false.into(),
    });
    let workers: Vec<WorkerHandle> = (0..2)
        .map(|i| {
            run_worker(
                Arc::clone(&p.broker),
                Arc::clone(&probe) as Arc<dyn RecordSink>,
                WorkerConfig::new(format!("w{i}")),
            )
            .unwrap()
        })
        .collect();
    let handle = run_simulator(sim.clone(), TopicSink::new(Arc::clone(&p.broker))).map_err(|e| e.to_string())?;
    thread::sleep(Duration::from_secs(2));
    probe.recording.store(true, std::sync::atomic::Ordering::Relaxed);
    thread::sleep(Duration::from_secs(10));
    probe.recording.store(false, std::sync::atomic::Ordering::Relaxed);
    let published = handle.stop();
    for w in workers {
        w.stop().map_err(|e| e.to_string())?;
    }
    let mut samples = std::mem::take(&mut *probe.samples.lock());
    ensure(samples.len() > 1000, || format!("only {} aggregates observed", samples.len()))?;
    samples.sort_unstable();
    let p95 = samples[(samples.len() * 95).div_ceil(100) - 1];
    let p50 = samples[samples.len() / 2];
    let rate = published as f64 / 12.0;
    ensure(p95 < 1000, || format!("p95 {p95} ms (p50 {p50} ms)"))?;
    Ok(format!("{rate:.0} rec/s offered, {} aggregates, p50 {p50} ms, p95 {p95} ms", samples.len()))
}

