//! Push bridge for power distribution units that report per-outlet
//! measurements as JSON.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Flow, PublishError, RecordPublisher};
use crate::records::{ActivePowerRecord, SensorId};

pub const ACTIVE_POWER_METRIC: &str = "active-power";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PduPushMessage {
    pub pdu_id: String,
    pub outlets: Vec<PduOutlet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PduOutlet {
    pub outlet_id: String,
    pub samples: Vec<PduSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PduSample {
    pub timestamp: i64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Error)]
pub enum PduError {
    #[error("malformed PDU message: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error(transparent)]
    Publish(#[from] PublishError),
}

/// The conversion from a push message to records: one record per
/// active-power sample, identified as `<pduId>/<outletId>`.
pub fn pdu_flow() -> Flow<PduPushMessage, ActivePowerRecord> {
    Flow::identity()
        .flat_map(|msg: PduPushMessage| {
            let pdu = msg.pdu_id;
            msg.outlets
                .into_iter()
                .flat_map(move |o| {
                    let id = format!("{pdu}/{}", o.outlet_id);
                    o.samples.into_iter().map(move |s| (id.clone(), s))
                })
                .collect::<Vec<_>>()
        })
        .filter(|(_, s)| s.metric == ACTIVE_POWER_METRIC)
        .try_map(|(id, s)| -> Result<_, String> {
            let id = SensorId::new(id).map_err(|e| e.to_string())?;
            ActivePowerRecord::new(id, s.timestamp, s.value).map_err(|e| e.to_string())
        })
}

pub struct PduBridge<P> {
    flow: Flow<PduPushMessage, ActivePowerRecord>,
    sink: P,
    dropped: AtomicU64,
}

impl<P: RecordPublisher> PduBridge<P> {
    pub fn new(sink: P) -> Self {
        Self {
            flow: pdu_flow(),
            sink,
            dropped: AtomicU64::new(0),
        }
    }

    /// Publishes the records of one message and returns how many there were.
    pub fn ingest(&self, msg: PduPushMessage) -> Result<usize, PduError> {
        let processed = self.flow.process(msg);
        if !processed.errors.is_empty() {
            for e in &processed.errors {
                tracing::warn!(error = %e, "dropped PDU sample");
            }
            self.dropped
                .fetch_add(processed.errors.len() as u64, Ordering::Relaxed);
        }
        self.sink.publish_batch(&processed.items)?;
        Ok(processed.items.len())
    }

    pub fn ingest_json(&self, body: &[u8]) -> Result<usize, PduError> {
        let msg: PduPushMessage = serde_json::from_slice(body)?;
        self.ingest(msg)
    }

    /// Samples dropped because a stage failed on them.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}
