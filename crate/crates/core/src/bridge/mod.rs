//! Record bridges: adapters that turn sensor-specific input into canonical
//! [`ActivePowerRecord`]s on the `records` topic.
//!
//! A bridge is declared as a stream pipeline:
//!
//! ```
//! use wattflow::bridge::pipeline;
//!
//! let out = pipeline(1..=3)
//!     .filter(|x| x % 2 == 1)
//!     .map(|x| x * 10)
//!     .flat_map(|x| vec![x, x + 1])
//!     .collect();
//! assert_eq!(out.items, vec![10, 11, 30, 31]);
//! ```
//!
//! A stage that fails on an element (by returning an error or panicking)
//! drops that element only; the failure is counted and logged and the
//! pipeline moves on.

mod pdu;
mod simulator;

use std::any::Any;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub use pdu::{pdu_flow, PduBridge, PduError, PduOutlet, PduPushMessage, PduSample, ACTIVE_POWER_METRIC};
pub use simulator::{run_simulator, InvalidSimulatorConfig, SimulatedBridge, SimulatorConfig, SimulatorHandle};

use crate::msglog::{Broker, LogError, RECORDS_TOPIC};
use crate::records::{encode_active_power, ActivePowerRecord, RecordError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{stage} stage failed: {message}")]
pub struct StageError {
    pub stage: &'static str,
    pub message: String,
}

impl StageError {
    pub fn new(stage: &'static str, message: impl fmt::Display) -> Self {
        Self {
            stage,
            message: message.to_string(),
        }
    }
}

type StepResult<T> = Vec<Result<T, StageError>>;
type StepFn<In, Out> = dyn Fn(In) -> StepResult<Out> + Send + Sync;

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_string())
}

fn guarded<T>(stage: &'static str, f: impl FnOnce() -> Result<T, StageError>) -> Result<T, StageError> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(StageError::new(stage, panic_message(p))))
}

/// A composable, element-wise transformation from `In` to any number of `Out`.
pub struct Flow<In, Out> {
    step: Arc<StepFn<In, Out>>,
}

impl<In, Out> Clone for Flow<In, Out> {
    fn clone(&self) -> Self {
        Self {
            step: Arc::clone(&self.step),
        }
    }
}

impl<T: Send + 'static> Flow<T, T> {
    pub fn identity() -> Self {
        Self {
            step: Arc::new(|x| vec![Ok(x)]),
        }
    }
}

impl<T: Send + 'static> Default for Flow<T, T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<In: 'static, Out: Send + 'static> Flow<In, Out> {
    fn then<New, F>(self, stage: &'static str, f: F) -> Flow<In, New>
    where
        F: Fn(Out) -> Result<Vec<New>, StageError> + Send + Sync + 'static,
    {
        let prev = self.step;
        Flow {
            step: Arc::new(move |x| {
                let mut out = Vec::new();
                for r in prev(x) {
                    match r.and_then(|v| guarded(stage, || f(v))) {
                        Ok(items) => out.extend(items.into_iter().map(Ok)),
                        Err(e) => out.push(Err(e)),
                    }
                }
                out
            }),
        }
    }

    /// Keeps only elements satisfying `predicate`.
    pub fn filter<P>(self, predicate: P) -> Flow<In, Out>
    where
        P: Fn(&Out) -> bool + Send + Sync + 'static,
    {
        self.then("filter", move |v| Ok(if predicate(&v) { vec![v] } else { Vec::new() }))
    }

    pub fn map<New, F>(self, f: F) -> Flow<In, New>
    where
        F: Fn(Out) -> New + Send + Sync + 'static,
    {
        self.then("map", move |v| Ok(vec![f(v)]))
    }

    /// Fallible map; an error drops the element.
    pub fn try_map<New, E, F>(self, f: F) -> Flow<In, New>
    where
        E: fmt::Display,
        F: Fn(Out) -> Result<New, E> + Send + Sync + 'static,
    {
        self.then("map", move |v| {
            f(v).map(|n| vec![n]).map_err(|e| StageError::new("map", e))
        })
    }

    pub fn flat_map<New, I, F>(self, f: F) -> Flow<In, New>
    where
        I: IntoIterator<Item = New>,
        F: Fn(Out) -> I + Send + Sync + 'static,
    {
        self.then("flatMap", move |v| Ok(f(v).into_iter().collect()))
    }

    /// Runs one input element through all stages.
    pub fn process(&self, input: In) -> Processed<Out> {
        let mut processed = Processed::default();
        for r in (self.step)(input) {
            match r {
                Ok(v) => processed.items.push(v),
                Err(e) => processed.errors.push(e),
            }
        }
        processed
    }
}

/// Outputs and per-element failures of a flow.
#[derive(Debug)]
pub struct Processed<T> {
    pub items: Vec<T>,
    pub errors: Vec<StageError>,
}

impl<T> Default for Processed<T> {
    fn default() -> Self {
        Self {
            items: Vec::new(),
            errors: Vec::new(),
        }
    }
}

/// Starts a pipeline over `source`.
pub fn pipeline<S>(source: S) -> Pipeline<S::IntoIter, S::Item, S::Item>
where
    S: IntoIterator,
    S::Item: Send + 'static,
{
    Pipeline {
        source: source.into_iter(),
        flow: Flow::identity(),
    }
}

pub struct Pipeline<S, In, Out> {
    source: S,
    flow: Flow<In, Out>,
}

impl<S, In, Out> Pipeline<S, In, Out>
where
    S: Iterator<Item = In>,
    In: 'static,
    Out: Send + 'static,
{
    pub fn filter<P>(self, predicate: P) -> Pipeline<S, In, Out>
    where
        P: Fn(&Out) -> bool + Send + Sync + 'static,
    {
        Pipeline {
            source: self.source,
            flow: self.flow.filter(predicate),
        }
    }

    pub fn map<New: Send + 'static, F>(self, f: F) -> Pipeline<S, In, New>
    where
        F: Fn(Out) -> New + Send + Sync + 'static,
    {
        Pipeline {
            source: self.source,
            flow: self.flow.map(f),
        }
    }

    pub fn try_map<New: Send + 'static, E: fmt::Display, F>(self, f: F) -> Pipeline<S, In, New>
    where
        F: Fn(Out) -> Result<New, E> + Send + Sync + 'static,
    {
        Pipeline {
            source: self.source,
            flow: self.flow.try_map(f),
        }
    }

    pub fn flat_map<New: Send + 'static, I, F>(self, f: F) -> Pipeline<S, In, New>
    where
        I: IntoIterator<Item = New>,
        F: Fn(Out) -> I + Send + Sync + 'static,
    {
        Pipeline {
            source: self.source,
            flow: self.flow.flat_map(f),
        }
    }

    /// Runs the whole source and gathers the outputs in memory.
    pub fn collect(self) -> Processed<Out> {
        let mut all = Processed::default();
        for element in self.source {
            let p = self.flow.process(element);
            all.items.extend(p.items);
            all.errors.extend(p.errors);
        }
        all
    }
}

impl<S, In> Pipeline<S, In, ActivePowerRecord>
where
    S: Iterator<Item = In>,
    In: 'static,
{
    /// Attaches a sink. Nothing runs until [`RunnablePipeline::run`].
    pub fn to<P: RecordPublisher>(self, sink: P) -> RunnablePipeline<S, In, P> {
        RunnablePipeline {
            source: self.source,
            flow: self.flow,
            sink,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub consumed: u64,
    pub published: u64,
    pub errors: u64,
}

pub struct RunnablePipeline<S, In, P> {
    source: S,
    flow: Flow<In, ActivePowerRecord>,
    sink: P,
}

impl<S, In, P> RunnablePipeline<S, In, P>
where
    S: Iterator<Item = In>,
    In: 'static,
    P: RecordPublisher,
{
    pub fn run(self) -> PipelineStats {
        let mut stats = PipelineStats::default();
        for element in self.source {
            stats.consumed += 1;
            let p = self.flow.process(element);
            for e in &p.errors {
                tracing::warn!(error = %e, "dropped element");
            }
            stats.errors += p.errors.len() as u64;
            for r in &p.items {
                match self.sink.publish(r) {
                    Ok(()) => stats.published += 1,
                    Err(e) => {
                        tracing::warn!(error = %e, "publish failed");
                        stats.errors += 1;
                    }
                }
            }
        }
        stats
    }
}

#[derive(Debug, Error)]
pub enum PublishError {
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("remote publish failed: {0}")]
    Remote(String),
}

/// Where a bridge writes its records. Implementations key every message by
/// the record's identifier.
pub trait RecordPublisher: Send + Sync {
    fn publish(&self, record: &ActivePowerRecord) -> Result<(), PublishError>;

    fn publish_batch(&self, records: &[ActivePowerRecord]) -> Result<(), PublishError> {
        records.iter().try_for_each(|r| self.publish(r))
    }
}

impl<P: RecordPublisher + ?Sized> RecordPublisher for Arc<P> {
    fn publish(&self, record: &ActivePowerRecord) -> Result<(), PublishError> {
        (**self).publish(record)
    }

    fn publish_batch(&self, records: &[ActivePowerRecord]) -> Result<(), PublishError> {
        (**self).publish_batch(records)
    }
}

/// Publishes records to a log topic (by default `records`).
#[derive(Clone)]
pub struct TopicSink {
    broker: Arc<Broker>,
    topic: String,
    published: Arc<AtomicU64>,
}

impl TopicSink {
    pub fn new(broker: Arc<Broker>) -> Self {
        Self::with_topic(broker, RECORDS_TOPIC)
    }

    pub fn with_topic(broker: Arc<Broker>, topic: impl Into<String>) -> Self {
        Self {
            broker,
            topic: topic.into(),
            published: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn published(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }
}

impl RecordPublisher for TopicSink {
    fn publish(&self, record: &ActivePowerRecord) -> Result<(), PublishError> {
        let bytes = encode_active_power(record)?;
        self.broker
            .publish(&self.topic, record.identifier.as_bytes(), &bytes)?;
        self.published.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }
}

/// Posts records to a node's `/ingest/records` endpoint.
pub struct HttpPublisher {
    client: reqwest::blocking::Client,
    url: String,
}

impl HttpPublisher {
    pub fn new(base_url: &str) -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
            url: format!("{}/ingest/records", base_url.trim_end_matches('/')),
        }
    }
}

impl RecordPublisher for HttpPublisher {
    fn publish(&self, record: &ActivePowerRecord) -> Result<(), PublishError> {
        self.publish_batch(std::slice::from_ref(record))
    }

    fn publish_batch(&self, records: &[ActivePowerRecord]) -> Result<(), PublishError> {
        let mut body = Vec::with_capacity(records.len() * 80 + 2);
        body.push(b'[');
        for (i, r) in records.iter().enumerate() {
            if i > 0 {
                body.push(b',');
            }
            body.extend_from_slice(&encode_active_power(r)?);
        }
        body.push(b']');
        let response = self
            .client
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .map_err(|e| PublishError::Remote(e.to_string()))?;
        if !response.status().is_success() {
            return Err(PublishError::Remote(format!("{} answered {}", self.url, response.status())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::SensorId;

    #[test]
    fn filter_false_yields_nothing() {
        let out = pipeline(0..100).filter(|_| false).collect();
        assert!(out.items.is_empty());
        assert!(out.errors.is_empty());
    }

    #[test]
    fn flat_map_duplicates() {
        let out = pipeline(["a", "b", "c"]).flat_map(|x| [x, x]).collect();
        assert_eq!(out.items.len(), 6);
    }

    #[test]
    fn failing_elements_are_dropped_and_counted() {
        let out = pipeline(0..10)
            .try_map(|x| if x == 3 { Err("bad element") } else { Ok(x) })
            .map(|x| {
                if x == 7 {
                    panic!("boom");
                }
                x
            })
            .collect();
        assert_eq!(out.items, vec![0, 1, 2, 4, 5, 6, 8, 9]);
        assert_eq!(out.errors.len(), 2);
        assert_eq!(out.errors[1].message, "boom");
    }

    #[test]
    fn sink_receives_records_keyed_by_identifier() {
        let broker = Broker::in_memory();
        broker.create_topic(RECORDS_TOPIC, 4).unwrap();
        let sink = TopicSink::new(Arc::clone(&broker));
        let stats = pipeline(0..5i64)
            .try_map(|i| ActivePowerRecord::new(SensorId::new(format!("s{i}")).unwrap(), i, i as f64))
            .to(sink.clone())
            .run();
        assert_eq!(stats, PipelineStats { consumed: 5, published: 5, errors: 0 });
        let msgs = broker.reader(RECORDS_TOPIC).unwrap().drain().unwrap();
        assert_eq!(msgs.len(), 5);
        for m in msgs {
            let r = crate::records::decode_active_power(&m.value).unwrap();
            assert_eq!(&m.key[..], r.identifier.as_bytes());
        }
    }
}
