//! HTTP endpoints of the node services. Each function returns a
//! self-contained router; a node merges the ones it hosts.

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aggregator::MetricsSnapshot;
use crate::bridge::{PduBridge, PduError, RecordPublisher, TopicSink};
use crate::history::{QueryError, SeriesStore};
use crate::records::{record_from_value, ActivePowerRecord, Record};
use crate::registry::{HierarchyError, HierarchyFollower, HierarchySpec, Registry, RegistryError};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        Self {
            status,
            body: json!({ "error": message.to_string() }),
        }
    }

    fn bad_request(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::Hierarchy(HierarchyError::UnknownSensor(_)) => Self::new(StatusCode::NOT_FOUND, e),
            _ => Self::bad_request(e),
        }
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Invalid(violations) => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({ "violations": violations }),
            },
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other),
        }
    }
}

impl From<PduError> for ApiError {
    fn from(e: PduError) -> Self {
        match e {
            PduError::Malformed(_) => Self::bad_request(e),
            PduError::Publish(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, e),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

// Configuration service.

pub fn registry_routes(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/api/hierarchy", get(get_hierarchy).put(put_hierarchy))
        .with_state(registry)
}

async fn get_hierarchy(State(registry): State<Arc<Registry>>) -> Response {
    Json(registry.get_hierarchy().as_ref().clone()).into_response()
}

async fn put_hierarchy(State(registry): State<Arc<Registry>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let spec: HierarchySpec =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed hierarchy: {e}")))?;
    let version = tokio::task::spawn_blocking(move || registry.put_hierarchy(spec))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))??;
    Ok(Json(json!({ "version": version })))
}

// History service.

#[derive(Clone)]
struct HistoryState {
    store: Arc<SeriesStore>,
    hierarchy: Arc<HierarchyFollower>,
}

pub fn history_routes(store: Arc<SeriesStore>, hierarchy: Arc<HierarchyFollower>) -> Router {
    Router::new()
        .route("/api/power/:id", get(power_range))
        .route("/api/power/:id/stats", get(power_stats))
        .route("/api/power/:id/trend", get(power_trend))
        .route("/api/power/:id/histogram", get(power_histogram))
        .route("/api/power/:id/distribution", get(power_distribution))
        .route("/api/power/:id/latest", get(power_latest))
        .with_state(HistoryState { store, hierarchy })
}

#[derive(Debug, Deserialize)]
struct RangeParams {
    from: Option<i64>,
    to: Option<i64>,
}

impl RangeParams {
    fn bounds(&self) -> (i64, i64) {
        (self.from.unwrap_or(0), self.to.unwrap_or(i64::MAX))
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TrendParams {
    window_ms: i64,
    now: Option<i64>,
}

#[derive(Debug, Deserialize)]
struct HistogramParams {
    from: Option<i64>,
    to: Option<i64>,
    bins: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct AtParams {
    at: Option<i64>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct TrendResponse {
    identifier: String,
    window_ms: i64,
    now: i64,
    ratio: Option<f64>,
}

async fn power_range(
    State(s): State<HistoryState>,
    Path(id): Path<String>,
    Query(q): Query<RangeParams>,
) -> ApiResult<Json<Vec<Record>>> {
    let (from, to) = q.bounds();
    Ok(Json(s.store.range(&id, from, to)?))
}

async fn power_stats(State(s): State<HistoryState>, Path(id): Path<String>, Query(q): Query<RangeParams>) -> ApiResult<Response> {
    let (from, to) = q.bounds();
    Ok(Json(s.store.stats(&id, from, to)?).into_response())
}

async fn power_trend(State(s): State<HistoryState>, Path(id): Path<String>, Query(q): Query<TrendParams>) -> ApiResult<Response> {
    let now = q.now.unwrap_or_else(now_ms);
    let ratio = s.store.trend(&id, q.window_ms, now)?;
    Ok(Json(TrendResponse {
        identifier: id,
        window_ms: q.window_ms,
        now,
        ratio,
    })
    .into_response())
}

async fn power_histogram(
    State(s): State<HistoryState>,
    Path(id): Path<String>,
    Query(q): Query<HistogramParams>,
) -> ApiResult<Response> {
    let buckets = s.store.histogram(
        &id,
        q.from.unwrap_or(0),
        q.to.unwrap_or(i64::MAX),
        q.bins.unwrap_or(10),
    )?;
    Ok(Json(buckets).into_response())
}

async fn power_distribution(State(s): State<HistoryState>, Path(id): Path<String>, Query(q): Query<AtParams>) -> ApiResult<Response> {
    let hierarchy = s.hierarchy.get();
    let shares = s.store.distribution(&hierarchy, &id, q.at.unwrap_or_else(now_ms))?;
    Ok(Json(shares).into_response())
}

async fn power_latest(State(s): State<HistoryState>, Path(id): Path<String>) -> ApiResult<Json<Record>> {
    s.store
        .latest(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no data for sensor {id}")))
}

// Ingestion.

#[derive(Clone)]
struct IngestState {
    pdu: Arc<PduBridge<TopicSink>>,
    sink: TopicSink,
}

pub fn ingest_routes(sink: TopicSink) -> Router {
    Router::new()
        .route("/ingest/pdu", post(ingest_pdu))
        .route("/ingest/records", post(ingest_records))
        .with_state(IngestState {
            pdu: Arc::new(PduBridge::new(sink.clone())),
            sink,
        })
}

async fn ingest_pdu(State(s): State<IngestState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let published = s.pdu.ingest_json(&body)?;
    Ok(Json(json!({ "published": published })))
}

/// Accepts a JSON array of active-power records, or one record per line.
/// Nothing is published unless every record is valid.
pub fn parse_record_batch(body: &[u8]) -> Result<Vec<ActivePowerRecord>, String> {
    let text = std::str::from_utf8(body).map_err(|e| e.to_string())?;
    let values: Vec<serde_json::Value> = if text.trim_start().starts_with('[') {
        serde_json::from_str(text).map_err(|e| e.to_string())?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?
    };
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| match record_from_value(v) {
            Ok(Record::ActivePower(r)) => Ok(r),
            Ok(Record::Aggregated(_)) => Err(format!("record {i}: only active-power records are accepted")),
            Err(e) => Err(format!("record {i}: {e}")),
        })
        .collect()
}

async fn ingest_records(State(s): State<IngestState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let records = parse_record_batch(&body).map_err(ApiError::bad_request)?;
    s.sink
        .publish_batch(&records)
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e))?;
    Ok(Json(json!({ "published": records.len() })))
}

// Metrics.

pub type MetricsSource = Arc<dyn Fn() -> MetricsSnapshot + Send + Sync>;

pub fn metrics_routes(source: MetricsSource) -> Router {
    Router::new()
        .route("/metrics", get(metrics))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(source)
}

async fn metrics(State(source): State<MetricsSource>) -> Response {
    (
        [(header::CONTENT_TYPE, "text/plain; version=0.0.4")],
        source().render(),
    )
        .into_response()
}
