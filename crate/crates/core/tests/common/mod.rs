//! Helpers shared by the integration tests: random hierarchies with an
//! independent parent-pointer model, a brute-force aggregation oracle and
//! pipeline plumbing.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use wattflow::aggregator::AGGREGATOR_GROUP;
use wattflow::msglog::{Broker, AGGREGATED_RECORDS_TOPIC, GROUPED_RECORDS_TOPIC, RECORDS_TOPIC};
use wattflow::records::{decode_record, ActivePowerRecord, Record, SensorId};
use wattflow::history::SeriesStore;
use wattflow::registry::{FlatNode, HierarchySpec, NestedNode, SensorHierarchy, SensorKind};

/// A tree as plain parent pointers, independent of the library's model.
#[derive(Debug, Clone)]
pub struct TreeModel {
    pub parent: BTreeMap<String, Option<String>>,
    pub groups: Vec<String>,
    pub leaves: Vec<String>,
}

impl TreeModel {
    pub fn ancestors(&self, id: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = self.parent[id].clone();
        while let Some(p) = cur {
            cur = self.parent[&p].clone();
            out.push(p);
        }
        out
    }

    pub fn leaves_below(&self, group: &str) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|l| self.ancestors(l).iter().any(|a| a == group))
            .cloned()
            .collect()
    }

    pub fn spec(&self) -> HierarchySpec {
        let nodes = self
            .parent
            .iter()
            .map(|(id, parent)| FlatNode {
                identifier: id.clone(),
                name: None,
                parent: parent.clone(),
                kind: Some(if self.groups.contains(id) {
                    SensorKind::Aggregated
                } else {
                    SensorKind::Machine
                }),
            })
            .collect();
        HierarchySpec::Flat { nodes }
    }

    /// Moves `leaf` below `group`.
    pub fn reparent(&mut self, leaf: &str, group: &str) {
        self.parent.insert(leaf.to_string(), Some(group.to_string()));
    }
}

/// Random tree with at most `max_levels` levels (root included) and
/// between 1 and `max_leaves` leaves.
pub fn random_tree(rng: &mut impl Rng, max_levels: usize, max_leaves: usize) -> TreeModel {
    let mut parent = BTreeMap::new();
    let mut depth: HashMap<String, usize> = HashMap::new();
    parent.insert("root".to_string(), None);
    depth.insert("root".to_string(), 0);
    let mut groups = vec!["root".to_string()];
    let mut leaves = Vec::new();
    let target = rng.gen_range(1..=max_leaves);
    let mut n = 0;
    while leaves.len() < target {
        n += 1;
        let open: Vec<&String> = groups.iter().filter(|g| depth[*g] + 1 < max_levels).collect();
        let g = (*open.choose(rng).unwrap()).clone();
        let d = depth[&g] + 1;
        let make_group = d + 1 < max_levels && rng.gen_bool(0.3);
        let id = if make_group { format!("g{n}") } else { format!("s{n}") };
        parent.insert(id.clone(), Some(g));
        depth.insert(id.clone(), d);
        if make_group {
            groups.push(id);
        } else {
            leaves.push(id);
        }
    }
    TreeModel { parent, groups, leaves }
}

/// `count` records over random leaves; timestamps are random, unique per
/// leaf and arrive out of order.
pub fn random_records(rng: &mut impl Rng, tree: &TreeModel, count: usize) -> Vec<ActivePowerRecord> {
    let mut used: HashSet<(usize, i64)> = HashSet::new();
    (0..count)
        .map(|_| {
            let leaf = rng.gen_range(0..tree.leaves.len());
            let ts = loop {
                let ts = rng.gen_range(1_000_000..2_000_000i64);
                if used.insert((leaf, ts)) {
                    break ts;
                }
            };
            ActivePowerRecord::new(SensorId::new(tree.leaves[leaf].clone()).unwrap(), ts, rng.gen_range(0.0..1000.0)).unwrap()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expected {
    pub count: u64,
    pub sum: f64,
    pub min: f64,
    pub max: f64,
}

/// Latest-value sum per group by brute force: for every leaf the record
/// with the largest timestamp (later in publish order on ties).
pub fn oracle(tree: &TreeModel, records: &[ActivePowerRecord]) -> BTreeMap<String, Expected> {
    let mut latest: HashMap<&str, (i64, f64)> = HashMap::new();
    for r in records {
        let e = latest.entry(r.identifier.as_str()).or_insert((i64::MIN, 0.0));
        if r.timestamp >= e.0 {
            *e = (r.timestamp, r.value_in_w);
        }
    }
    let mut out = BTreeMap::new();
    for g in &tree.groups {
        let values: Vec<f64> = tree
            .leaves_below(g)
            .iter()
            .filter_map(|l| latest.get(l.as_str()).map(|(_, v)| *v))
            .collect();
        if values.is_empty() {
            continue;
        }
        out.insert(
            g.clone(),
            Expected {
                count: values.len() as u64,
                sum: values.iter().sum(),
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            },
        );
    }
    out
}

/// Last aggregate emitted per group on `aggregated-records`.
pub fn final_aggregates(broker: &Arc<Broker>) -> BTreeMap<String, Expected> {
    let mut out = BTreeMap::new();
    for m in broker.reader(AGGREGATED_RECORDS_TOPIC).unwrap().drain().unwrap() {
        let Record::Aggregated(a) = decode_record(&m.value).unwrap() else {
            panic!("raw record on the aggregates topic");
        };
        assert_eq!(&m.key[..], a.identifier.as_bytes());
        out.insert(
            a.identifier.into_string(),
            Expected {
                count: a.count,
                sum: a.sum_in_w,
                min: a.min_in_w,
                max: a.max_in_w,
            },
        );
    }
    out
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Compares aggregates against the oracle; returns a description of the
/// first mismatch.
pub fn compare(actual: &BTreeMap<String, Expected>, expected: &BTreeMap<String, Expected>) -> Result<(), String> {
    if actual.keys().ne(expected.keys()) {
        return Err(format!(
            "groups differ: got {:?}, expected {:?}",
            actual.keys().collect::<Vec<_>>(),
            expected.keys().collect::<Vec<_>>()
        ));
    }
    for (g, e) in expected {
        let a = &actual[g];
        if a.count != e.count || !close(a.sum, e.sum, 1e-9) || a.min != e.min || a.max != e.max {
            return Err(format!("group {g}: got {a:?}, expected {e:?}"));
        }
    }
    Ok(())
}

/// Waits until the aggregator group has committed everything on its input
/// topics. Returns false on timeout.
pub fn wait_drained(broker: &Arc<Broker>, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    let mut zero_streak = 0;
    while Instant::now() < deadline {
        let lag = broker
            .group_lag(AGGREGATOR_GROUP, &[RECORDS_TOPIC, GROUPED_RECORDS_TOPIC])
            .unwrap();
        zero_streak = if lag == 0 { zero_streak + 1 } else { 0 };
        if zero_streak >= 3 {
            return true;
        }
        thread::sleep(Duration::from_millis(20));
    }
    false
}

pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(10));
    }
    f()
}

/// One sensor's series as an independent model: timestamp → value, later
/// writes replacing earlier ones.
pub type SeriesModel = BTreeMap<i64, f64>;

pub fn random_series(rng: &mut impl Rng, max_len: usize, span: i64) -> (Vec<(i64, f64)>, SeriesModel) {
    let n = rng.gen_range(0..=max_len);
    let writes: Vec<(i64, f64)> = (0..n)
        .map(|_| {
            let v = if rng.gen_bool(0.1) { 500.0 } else { rng.gen_range(0.0..1000.0) };
            (rng.gen_range(0..span), v)
        })
        .collect();
    let model = writes.iter().copied().collect();
    (writes, model)
}

pub fn in_range(model: &SeriesModel, from: i64, to: i64) -> Vec<(i64, f64)> {
    model.iter().filter(|(t, _)| **t >= from && **t < to).map(|(t, v)| (*t, *v)).collect()
}

/// count, sum, average, min, max of the values in `[from, to)`.
pub fn stats_oracle(model: &SeriesModel, from: i64, to: i64) -> (u64, f64, Option<f64>, Option<f64>, Option<f64>) {
    let vs: Vec<f64> = in_range(model, from, to).into_iter().map(|(_, v)| v).collect();
    if vs.is_empty() {
        return (0, 0.0, None, None, None);
    }
    let sum: f64 = vs.iter().sum();
    let min = vs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (vs.len() as u64, sum, Some(sum / vs.len() as f64), Some(min), Some(max))
}

pub fn trend_oracle(model: &SeriesModel, window: i64, now: i64) -> Option<f64> {
    let recent = stats_oracle(model, now - window, now).2?;
    let previous = stats_oracle(model, now - 2 * window, now - window).2?;
    let r = recent / previous;
    r.is_finite().then_some(r)
}

/// Checks a histogram against the values it summarizes. Bounds must be
/// contiguous equal-width steps from min to max, and each count must match
/// a recount of the values against the returned bounds.
pub fn check_histogram(values: &[f64], bins: usize, buckets: &[(f64, f64, u64)]) -> Result<(), String> {
    if values.is_empty() {
        return if buckets.is_empty() { Ok(()) } else { Err("buckets for no values".into()) };
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: u64 = buckets.iter().map(|b| b.2).sum();
    if total != values.len() as u64 {
        return Err(format!("counts sum to {total}, expected {}", values.len()));
    }
    if min == max {
        return if buckets == [(min, max, values.len() as u64)] { Ok(()) } else { Err(format!("degenerate: {buckets:?}")) };
    }
    if buckets.len() != bins {
        return Err(format!("{} buckets, expected {bins}", buckets.len()));
    }
    let width = (max - min) / bins as f64;
    for (i, &(lo, hi, count)) in buckets.iter().enumerate() {
        let expected_lo = min + i as f64 * width;
        if !close(lo, expected_lo, 1e-9) && (lo - expected_lo).abs() > 1e-9 {
            return Err(format!("bucket {i} lower {lo}, expected {expected_lo}"));
        }
        if i + 1 < bins && hi != buckets[i + 1].0 {
            return Err(format!("bucket {i} is not contiguous"));
        }
        let last = i + 1 == bins;
        let recount = values.iter().filter(|&&v| v >= lo && (v < hi || (last && v <= hi))).count() as u64;
        if recount != count {
            return Err(format!("bucket {i} [{lo}, {hi}) holds {recount} values, reported {count}"));
        }
    }
    if buckets[0].0 != min || buckets[bins - 1].1 != max {
        return Err("outer bounds differ from min/max".into());
    }
    Ok(())
}

/// Runs every history query on one random dataset and compares it with the
/// oracles above.
pub fn check_query_dataset(rng: &mut impl Rng) -> Result<(), String> {
    const SPAN: i64 = 10_000;
    let store = SeriesStore::in_memory();
    let children = ["c0", "c1", "c2", "c3"];
    let mut models: BTreeMap<&str, SeriesModel> = BTreeMap::new();
    for id in children {
        let (writes, model) = random_series(rng, 150, SPAN);
        let records: Vec<Record> = writes
            .iter()
            .map(|&(t, v)| ActivePowerRecord::new(SensorId::new(id).unwrap(), t, v).unwrap().into())
            .collect();
        // Split into uneven batches so replacement crosses batch borders.
        let cut = if records.is_empty() { 0 } else { rng.gen_range(0..records.len()) };
        wattflow::history::RecordSink::append_batch(&store, &records[..cut]).map_err(|e| e.to_string())?;
        wattflow::history::RecordSink::append_batch(&store, &records[cut..]).map_err(|e| e.to_string())?;
        models.insert(id, model);
    }
    let model = &models["c0"];
    let a = rng.gen_range(-100..SPAN + 100);
    let b = rng.gen_range(-100..SPAN + 100);
    let (from, to) = (a.min(b), a.max(b));

    let got: Vec<(i64, f64)> = store
        .range("c0", from, to)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|r| (r.timestamp(), r.power_in_w()))
        .collect();
    if got != in_range(model, from, to) {
        return Err(format!("range [{from}, {to}) differs"));
    }

    let st = store.stats("c0", from, to).map_err(|e| e.to_string())?;
    let (count, sum, avg, min, max) = stats_oracle(model, from, to);
    let avg_ok = match (st.average_in_w, avg) {
        (Some(x), Some(y)) => close(x, y, 1e-9),
        (None, None) => true,
        _ => false,
    };
    if st.count != count || !close(st.sum_in_w, sum, 1e-9) || !avg_ok || st.min_in_w != min || st.max_in_w != max {
        return Err(format!("stats [{from}, {to}): got {st:?}, expected {:?}", (count, sum, avg, min, max)));
    }

    let window = rng.gen_range(1..SPAN / 2);
    let now = rng.gen_range(0..SPAN + window);
    let trend = store.trend("c0", window, now).map_err(|e| e.to_string())?;
    let expected = trend_oracle(model, window, now);
    let trend_ok = match (trend, expected) {
        (Some(x), Some(y)) => close(x, y, 1e-9),
        (None, None) => true,
        _ => false,
    };
    if !trend_ok {
        return Err(format!("trend window {window} now {now}: got {trend:?}, expected {expected:?}"));
    }

    let bins = rng.gen_range(1..=20);
    let buckets: Vec<(f64, f64, u64)> = store
        .histogram("c0", from, to, bins)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|b| (b.lower, b.upper, b.count))
        .collect();
    let values: Vec<f64> = in_range(model, from, to).into_iter().map(|(_, v)| v).collect();
    check_histogram(&values, bins, &buckets).map_err(|e| format!("histogram [{from}, {to}) bins {bins}: {e}"))?;

    let hierarchy = SensorHierarchy::build(
        1,
        HierarchySpec::nested(NestedNode::group(
            "root",
            children.iter().map(|c| NestedNode::machine(*c)).collect(),
        )),
    )
    .unwrap();
    let at = rng.gen_range(-10..SPAN + 10);
    let shares = store.distribution(&hierarchy, "root", at).map_err(|e| e.to_string())?;
    let latest: Vec<(&str, f64)> = children
        .iter()
        .filter_map(|c| models[c].range(..=at).next_back().map(|(_, v)| (*c, *v)))
        .collect();
    let total: f64 = latest.iter().map(|(_, v)| v).sum();
    if shares.len() != latest.len() {
        return Err(format!("distribution at {at}: {} shares, expected {}", shares.len(), latest.len()));
    }
    for (s, (id, v)) in shares.iter().zip(&latest) {
        let share_ok = match s.share {
            Some(x) => total != 0.0 && close(x, v / total, 1e-9),
            None => total == 0.0,
        };
        if s.identifier.as_str() != *id || s.value_in_w != *v || !share_ok {
            return Err(format!("distribution at {at}: got {s:?}, expected {id} = {v} of {total}"));
        }
    }
    Ok(())
}

/// An axum router served on a random local port from its own runtime
/// thread. Stops when dropped.
pub struct Server {
    pub base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl Server {
    pub fn start(router: axum::Router) -> Self {
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let thread = thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                wattflow::node::serve(listener, router, async {
                    let _ = stopped.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Self {
            base: format!("http://{addr}"),
            stop: Some(stop),
            thread: Some(thread),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
